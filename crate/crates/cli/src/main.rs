use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use egan_cli::{run, Dataset, ExperimentKind, ExperimentSpec, HarnessError, LossName, Overrides, Result};

#[derive(Parser)]
#[command(name = "egan", version, about = "Entropic OT and linear-generator GAN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random PSD covariance and sample a dataset from it.
    GenData(GenDataArgs),
    /// Report the analytic population solutions.
    Population(Common),
    /// Train a linear generator.
    Train(Common),
    /// Entropic training checked against the soft-thresholded solution.
    Thm1Verify(Common),
    /// Training curves for several latent dimensions.
    Fig1(Common),
    /// Generalization gap against dataset size.
    GenSweep(Common),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    d: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Dataset file; the covariance goes next to it as `<stem>.cov.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    loss: Option<LossName>,
    #[arg(long)]
    tol: Option<f64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn spec(&self, kind: ExperimentKind) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path, Some(kind))?,
            None => {
                let seed = self
                    .seed
                    .ok_or_else(|| HarnessError::Config("--seed is required without --config".into()))?;
                ExperimentSpec::defaults(kind, seed)
            }
        };
        spec.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            lambda: self.lambda,
            d: self.d,
            r: self.r,
            n: self.n,
            batch: self.batch,
            iters: self.iters,
            loss: self.loss,
            tol: self.tol,
        });
        Ok(spec)
    }
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(t) = threads {
        if t == 0 {
            return Err(HarnessError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let (kind, common) = match cli.command {
        Command::GenData(a) => {
            let ds = Dataset::generate(a.d, a.n, a.seed)?;
            ds.save(&a.out)?;
            println!("wrote {} points (d={}) to {}", a.n, a.d, a.out.display());
            return Ok(());
        }
        Command::Population(c) => (ExperimentKind::Population, c),
        Command::Train(c) => (ExperimentKind::Train, c),
        Command::Thm1Verify(c) => (ExperimentKind::Thm1Verify, c),
        Command::Fig1(c) => (ExperimentKind::Fig1, c),
        Command::GenSweep(c) => (ExperimentKind::GenSweep, c),
    };
    set_threads(common.threads)?;
    let spec = common.spec(kind)?;
    let out = run(&spec)?;
    println!("{}: {} metric rows in {}", spec.id, out.rows.len(), out.out_dir.display());
    if let Some(slope) = out.summary.get("slope") {
        println!("log-log slope of mean gap: {slope}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
