//! Experiment drivers. Each returns its metric rows and a JSON summary and
//! writes both under the spec's output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use egan_core::rng::derive_seed;
use egan_core::{
    cov_frobenius, entropic_population_value, entropic_w2_discrete, gaussian_entropic_w2, generator_output_cov, r_pca,
    sample_gaussian, soft_threshold_pca, sym_eig, train_sgd_observed, DiscreteMeasure, Error as CoreError,
    GaussianMeasure, LinearGenerator, SinkhornParams, SymMatrix, TrainSeeds, TrainTrace,
};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{ExperimentKind, ExperimentSpec, LossName, TargetSpec};
use crate::dataset::{save_generator, write_file, Dataset};
use crate::error::{config, HarnessError, Result};
use crate::metrics::{write_csv, Metric, MetricRow};

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricRow>,
    pub summary: Value,
    pub out_dir: PathBuf,
}

pub fn run(spec: &ExperimentSpec) -> Result<RunOutput> {
    spec.validate()?;
    match spec.kind {
        ExperimentKind::Population => run_population(spec),
        ExperimentKind::Train | ExperimentKind::Thm1Verify | ExperimentKind::Fig1 => run_training_experiment(spec),
        ExperimentKind::GenSweep => run_generalization_sweep(spec),
    }
}

fn out_dir(spec: &ExperimentSpec) -> PathBuf {
    spec.out.clone().unwrap_or_else(|| Path::new("out").join(&spec.id))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    write_file(path, &(text + "\n"))
}

/// The target covariance named by the spec, plus the dataset when the target
/// is a file.
pub fn resolve_target(spec: &ExperimentSpec) -> Result<(SymMatrix, Option<Dataset>)> {
    let d = spec.d;
    let k = match &spec.target {
        TargetSpec::RandomPsd {} => egan_core::random_psd(d, spec.seeds.data)?,
        TargetSpec::ShiftedRandomPsd {} => {
            let mut m = egan_core::random_psd(d, spec.seeds.data)?.into_matrix();
            for i in 0..d {
                m[(i, i)] += 1.0;
            }
            SymMatrix::new(m)?
        }
        TargetSpec::Diagonal { values, normalize } => {
            let scale = if *normalize {
                values.iter().map(|v| v * v).sum::<f64>().sqrt()
            } else {
                1.0
            };
            if !(scale > 0.0) {
                return Err(config("diagonal target is zero"));
            }
            SymMatrix::from_diagonal(&values.iter().map(|v| v / scale).collect::<Vec<_>>())?
        }
        TargetSpec::Matrix { rows } => {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let m = DMatrix::from_row_slice(d, d, &flat);
            if m != m.transpose() {
                return Err(config("target matrix is not symmetric"));
            }
            SymMatrix::new(m)?
        }
        TargetSpec::Dataset { path } => {
            let ds = Dataset::load(path)?;
            if ds.dim() != d {
                return Err(config(format!("dataset {} has d = {}, spec says {d}", path.display(), ds.dim())));
            }
            return Ok((ds.cov.clone(), Some(ds)));
        }
    };
    if sym_eig(&k)?.min_eigenvalue() < -egan_core::linalg::PSD_TOLERANCE {
        return Err(config("target covariance is not positive semidefinite"));
    }
    Ok((k, None))
}

fn eigenvalues(k: &SymMatrix) -> Result<Vec<f64>> {
    Ok(sym_eig(k)?.eigenvalues.iter().copied().collect())
}

/// Analytic population solutions: soft-thresholded and plain r-PCA.
pub fn run_population(spec: &ExperimentSpec) -> Result<RunOutput> {
    let (k, _) = resolve_target(spec)?;
    let r = spec.r_values[0];
    let lambda = spec.lambda;
    let soft = soft_threshold_pca(&k, r, lambda)?;
    let rpca = r_pca(&k, r)?;
    let value = if lambda > 0.0 {
        Some(entropic_population_value(&k, r, lambda)?)
    } else {
        None
    };
    let k_eig = eigenvalues(&k)?;
    let min_eig = k_eig.last().copied().unwrap_or(0.0);
    let closed_form = if lambda > 0.0 && r == spec.d && lambda < 2.0 * min_eig {
        let g = GaussianMeasure::centered(soft.clone())?;
        Some(gaussian_entropic_w2(&g, &GaussianMeasure::centered(k.clone())?, lambda)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for (suffix, cov) in [("softthresh", &soft), ("rpca", &rpca)] {
        let id = format!("{}-{suffix}", spec.id);
        rows.push(MetricRow::new(&id, 0, Metric::DistToRpca, cov_frobenius(cov, &rpca)?, spec.seed));
        rows.push(MetricRow::new(&id, 0, Metric::DistToTrueCov, cov_frobenius(cov, &k)?, spec.seed));
        rows.push(MetricRow::new(&id, 0, Metric::DistToSoftthresh, cov_frobenius(cov, &soft)?, spec.seed));
        if suffix == "softthresh" {
            if let Some(v) = value {
                rows.push(MetricRow::new(&id, 0, Metric::Loss, v, spec.seed));
            }
        }
    }

    let summary = json!({
        "experiment": spec.id,
        "kind": "population",
        "d": spec.d,
        "r": r,
        "lambda": lambda,
        "target_eigenvalues": k_eig,
        "softthresh_eigenvalues": eigenvalues(&soft)?,
        "rpca_eigenvalues": eigenvalues(&rpca)?,
        "softthresh_cov": matrix_json(soft.as_matrix()),
        "rpca_cov": matrix_json(rpca.as_matrix()),
        "population_value": value,
        "closed_form_value": closed_form,
        "waterfilling_residual": closed_form.zip(value).map(|(c, v)| (c - v).abs()),
    });
    let dir = out_dir(spec);
    write_csv(&dir.join("metrics.csv"), &rows)?;
    write_json(&dir.join("population.json"), &summary)?;
    Ok(RunOutput {
        rows,
        summary,
        out_dir: dir,
    })
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array(m.row_iter().map(|row| json!(row.iter().collect::<Vec<_>>())).collect())
}

struct References {
    target: SymMatrix,
    rpca: SymMatrix,
    soft: Option<SymMatrix>,
}

impl References {
    fn new(k: &SymMatrix, r: usize, lambda: f64, loss: LossName) -> Result<Self> {
        Ok(References {
            target: k.clone(),
            rpca: r_pca(k, r)?,
            soft: match loss {
                LossName::Entropic => Some(soft_threshold_pca(k, r, lambda)?),
                LossName::Sinkhorn => None,
            },
        })
    }

    fn distances(&self, cov: &SymMatrix) -> Result<Vec<(Metric, f64)>> {
        let mut out = vec![
            (Metric::DistToRpca, cov_frobenius(cov, &self.rpca)?),
            (Metric::DistToTrueCov, cov_frobenius(cov, &self.target)?),
        ];
        if let Some(s) = &self.soft {
            out.push((Metric::DistToSoftthresh, cov_frobenius(cov, s)?));
        }
        Ok(out)
    }
}

struct TrainRun {
    r: usize,
    rows: Vec<MetricRow>,
    summary: Value,
    generator: LinearGenerator,
    error: Option<HarnessError>,
}

fn train_one(spec: &ExperimentSpec, id: &str, r: usize, k: &SymMatrix, data: &DiscreteMeasure) -> Result<TrainRun> {
    let cfg = spec.train_config(r);
    let refs = References::new(k, r, spec.lambda, spec.loss)?;
    let mut rows = Vec::new();
    let mut observe_error = None;
    let start = Instant::now();
    let result = train_sgd_observed(&cfg, data, Some(&refs.rpca), None, &mut |rec, g| {
        match refs.distances(&generator_output_cov(g)) {
            Ok(dists) => {
                for (m, v) in dists {
                    rows.push(MetricRow::new(id, rec.iteration, m, v, spec.seed));
                }
            }
            Err(e) => observe_error = observe_error.take().or(Some(e)),
        }
        rows.push(MetricRow::new(id, rec.iteration, Metric::Loss, rec.loss, spec.seed));
    });
    if let Some(e) = observe_error {
        return Err(e);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (trace, error): (TrainTrace, Option<HarnessError>) = match result {
        Ok(t) => (t, None),
        Err(CoreError::TrainingAborted {
            iteration,
            reason,
            trace,
        }) => {
            let partial = (*trace).clone();
            let err = HarnessError::Numerical(CoreError::TrainingAborted {
                iteration,
                reason,
                trace,
            });
            (partial, Some(err))
        }
        Err(e) => return Err(e.into()),
    };

    let final_cov = generator_output_cov(&trace.generator);
    let empirical = data.covariance();
    let final_dists: serde_json::Map<String, Value> = refs
        .distances(&final_cov)?
        .into_iter()
        .map(|(m, v)| (m.name().to_string(), json!(v)))
        .collect();
    let initial: serde_json::Map<String, Value> = rows
        .iter()
        .filter(|row| row.iteration_or_n == 0 && row.metric != Metric::Loss)
        .map(|row| (row.metric.name().to_string(), json!(row.value)))
        .collect();
    let summary = json!({
        "experiment": id,
        "kind": spec.kind.name(),
        "d": spec.d,
        "r": r,
        "lambda": spec.lambda,
        "loss": spec.loss,
        "n": data.len(),
        "batch_size": spec.batch_size,
        "iterations": spec.iterations,
        "epochs": (spec.iterations * spec.batch_size) as f64 / data.len() as f64,
        "skipped": trace.skipped,
        "elapsed_secs": elapsed,
        "initial": initial,
        "final": final_dists,
        "generator_trace": final_cov.trace(),
        "empirical_target_trace": empirical.trace(),
        "target_trace": k.trace(),
        "aborted": error.as_ref().map(|e| e.to_string()),
    });
    Ok(TrainRun {
        r,
        rows,
        summary,
        generator: trace.generator,
        error,
    })
}

/// Trains one generator per latent dimension in the spec. Metrics at every
/// logged iteration describe the generator before that iteration's update;
/// the summary's `final` block describes the generator after the last one.
pub fn run_training_experiment(spec: &ExperimentSpec) -> Result<RunOutput> {
    let (k, dataset) = resolve_target(spec)?;
    let dataset = match dataset {
        Some(ds) => ds,
        None => Dataset::sample(k.clone(), spec.n, spec.seeds.data)?,
    };
    let data = dataset.measure()?;
    let multi = spec.r_values.len() > 1;
    let runs: Vec<Result<TrainRun>> = spec
        .r_values
        .par_iter()
        .map(|&r| {
            let id = if multi {
                format!("{}-r{r}", spec.id)
            } else {
                spec.id.clone()
            };
            train_one(spec, &id, r, &k, &data)
        })
        .collect();

    let dir = out_dir(spec);
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut first_error = None;
    for run in runs {
        let run = run?;
        let name = if multi {
            format!("generator-r{}.csv", run.r)
        } else {
            "generator.csv".to_string()
        };
        save_generator(&dir.join(name), &run.generator)?;
        rows.extend(run.rows);
        summaries.push(run.summary);
        if first_error.is_none() {
            first_error = run.error;
        }
    }
    let summary = json!({ "experiment": spec.id, "runs": summaries, "spec": spec });
    write_csv(&dir.join("metrics.csv"), &rows)?;
    write_json(&dir.join("summary.json"), &summary)?;
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(RunOutput {
        rows,
        summary,
        out_dir: dir,
    })
}

struct SweepJob {
    n: usize,
    rep: usize,
    seed: u64,
    gap: f64,
    holdout_gap: f64,
}

/// Least-squares slope of `ln y` against `ln x`; `None` unless every `y` is
/// positive.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || ys.iter().any(|&y| !(y > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Some(sxy / sxx)
}

fn rep_seeds(base: &TrainSeeds, rep: usize) -> TrainSeeds {
    let rep = rep as u64;
    TrainSeeds {
        data: derive_seed(base.data, rep),
        init: derive_seed(base.init, rep),
        batches: derive_seed(base.batches, rep),
    }
}

/// Output covariance of the fitted generator: the last iterate, or the mean
/// of `GGᵀ` over the final `tail` fraction of iterations.
fn fit_covariance(spec: &ExperimentSpec, r: usize, seeds: TrainSeeds, data: &DiscreteMeasure) -> Result<SymMatrix> {
    let cfg = egan_core::TrainConfig {
        seeds,
        log_every: 1,
        ..spec.train_config(r)
    };
    let first = ((1.0 - spec.tail_average) * spec.iterations as f64).floor() as usize;
    let mut sum = DMatrix::zeros(spec.d, spec.d);
    let mut count = 0usize;
    let trace = train_sgd_observed(&cfg, data, None, None, &mut |rec, g| {
        if spec.tail_average > 0.0 && rec.iteration >= first {
            sum += generator_output_cov(g).as_matrix();
            count += 1;
        }
    })?;
    if count == 0 {
        return Ok(generator_output_cov(&trace.generator));
    }
    Ok(SymMatrix::new(sum / count as f64)?)
}

fn sweep_job(
    spec: &ExperimentSpec,
    k: &SymMatrix,
    population: f64,
    pool: &DMatrix<f64>,
    n: usize,
    rep: usize,
    seeds: TrainSeeds,
) -> Result<SweepJob> {
    let r = spec.r_values[0];
    let data = DiscreteMeasure::uniform(pool.rows(0, n).into_owned())?;
    let fitted = fit_covariance(spec, r, seeds, &data)?;
    let model = GaussianMeasure::centered(fitted)?;
    let target = GaussianMeasure::centered(k.clone())?;
    let analytic = gaussian_entropic_w2(&model, &target, spec.lambda)?;
    let holdout = spec.sweep.as_ref().map_or(1000, |s| s.holdout);
    let ys = sample_gaussian(&target, holdout, derive_seed(seeds.data, 1))?;
    let gs = sample_gaussian(&model, holdout, derive_seed(seeds.data, 2))?;
    let params = SinkhornParams::new(spec.lambda)
        .with_tol(spec.tol)
        .with_max_iter(spec.max_iter);
    let discrete = entropic_w2_discrete(&gs, &ys, &params)?;
    Ok(SweepJob {
        n,
        rep,
        seed: seeds.data,
        gap: analytic - population,
        holdout_gap: discrete - population,
    })
}

/// Fits a full-rank generator on nested datasets of growing size and records
/// the excess population loss of each fit.
pub fn run_generalization_sweep(spec: &ExperimentSpec) -> Result<RunOutput> {
    let sweep = spec.sweep.as_ref().ok_or_else(|| config("gen-sweep needs a 'sweep' grid"))?;
    let r = spec.r_values[0];
    if r != spec.d || spec.loss != LossName::Entropic {
        return Err(config("gen-sweep fits full-rank generators (r = d) with the entropic loss"));
    }
    let (k, _) = resolve_target(spec)?;
    let population = entropic_population_value(&k, r, spec.lambda)?;
    let n_max = *sweep.n.last().expect("validated grid");
    let base = spec.train_seeds();
    let target = GaussianMeasure::centered(k.clone())?;
    let pools: Vec<DMatrix<f64>> = (0..sweep.repetitions)
        .map(|rep| Ok(sample_gaussian(&target, n_max, rep_seeds(&base, rep).data)?.points().clone()))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = sweep
        .n
        .iter()
        .flat_map(|&n| (0..sweep.repetitions).map(move |rep| (n, rep)))
        .collect();
    let start = Instant::now();
    let results: Vec<Result<SweepJob>> = jobs
        .par_iter()
        .map(|&(n, rep)| sweep_job(spec, &k, population, &pools[rep], n, rep, rep_seeds(&base, rep)))
        .collect();
    let results: Vec<SweepJob> = results.into_iter().collect::<Result<_>>()?;

    let holdout_id = format!("{}-holdout", spec.id);
    let mean_id = format!("{}-mean", spec.id);
    let mut rows = Vec::new();
    let mut mean_gap = Vec::new();
    let mut mean_holdout = Vec::new();
    for &n in &sweep.n {
        let at_n: Vec<&SweepJob> = results.iter().filter(|j| j.n == n).collect();
        for j in &at_n {
            rows.push(MetricRow::new(&spec.id, n, Metric::GenGap, j.gap, j.seed));
        }
        for j in &at_n {
            rows.push(MetricRow::new(&holdout_id, n, Metric::GenGap, j.holdout_gap, j.seed));
        }
        let m = at_n.len() as f64;
        mean_gap.push(at_n.iter().map(|j| j.gap).sum::<f64>() / m);
        mean_holdout.push(at_n.iter().map(|j| j.holdout_gap).sum::<f64>() / m);
        rows.push(MetricRow::new(&mean_id, n, Metric::GenGap, *mean_gap.last().unwrap(), spec.seed));
    }
    let ns: Vec<f64> = sweep.n.iter().map(|&n| n as f64).collect();
    let slope = log_log_slope(&ns, &mean_gap);
    let per_rep: Vec<Value> = results
        .iter()
        .map(|j| json!({ "n": j.n, "rep": j.rep, "seed": j.seed, "gap": j.gap, "holdout_gap": j.holdout_gap }))
        .collect();
    let summary = json!({
        "experiment": spec.id,
        "kind": "gen-sweep",
        "d": spec.d,
        "r": r,
        "lambda": spec.lambda,
        "n": sweep.n,
        "repetitions": sweep.repetitions,
        "population_value": population,
        "mean_gap": mean_gap,
        "mean_holdout_gap": mean_holdout,
        "slope": slope,
        "holdout_slope": log_log_slope(&ns, &mean_holdout),
        "jobs": per_rep,
        "elapsed_secs": start.elapsed().as_secs_f64(),
        "spec": spec,
    });
    let dir = out_dir(spec);
    write_csv(&dir.join("metrics.csv"), &rows)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(RunOutput {
        rows,
        summary,
        out_dir: dir,
    })
}
