//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use egan_cli::read_csv;
use egan_core::{
    brute_force_entropic, entropic_grad, entropic_population_value, entropic_w2_discrete, gaussian_entropic_w2,
    random_psd, sample_gaussian, sinkhorn_divergence_discrete, sinkhorn_grad, soft_threshold_pca, sym_eig,
    DiscreteMeasure, GaussianMeasure, LinearGenerator, SinkhornParams, SymMatrix, SELF_TERM_COEFFICIENT,
};
use nalgebra::DMatrix;
use serde_json::Value;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-11;
const ACCEPTANCE_SEED: u64 = 1;

/// Final `dist_to_rpca` of the reference figure-1 runs (seed 1, T = 10 000).
const FIG1_FLOOR: [(usize, f64); 2] = [(4, 0.18549628355343484), (8, 0.37517820526707485)];
const FLOOR_SLACK: f64 = 1.05;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gaussian_cloud(cov: SymMatrix, n: usize, seed: u64) -> DiscreteMeasure {
    sample_gaussian(&GaussianMeasure::centered(cov).unwrap(), n, seed).unwrap()
}

fn identity(d: usize) -> SymMatrix {
    SymMatrix::new(DMatrix::identity(d, d)).unwrap()
}

/// Points from a Gaussian, weights from a softmax of an independent draw.
fn weighted_cloud(n: usize, d: usize, seed: u64) -> DiscreteMeasure {
    let points = gaussian_cloud(identity(d), n, seed).points().clone_owned();
    let logits = gaussian_cloud(identity(1), n, seed + 7_000).points().column(0).into_owned();
    let w = logits.map(f64::exp);
    let total = w.sum();
    DiscreteMeasure::new(points, w / total).unwrap()
}

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let shapes = [(1usize, 3usize), (2, 3), (3, 3)];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (s, &(n, m)) in shapes.iter().enumerate() {
        for (l, lambda) in [0.5, 1.0, 2.0, 8.0].into_iter().enumerate() {
            let seed = 100 + 10 * s as u64 + l as u64;
            let p = weighted_cloud(n, 2, seed);
            let q = weighted_cloud(m, 2, seed + 500);
            let sink = entropic_w2_discrete(&p, &q, &SinkhornParams::new(lambda)).unwrap();
            let brute = brute_force_entropic(&p, &q, lambda).unwrap();
            worst = worst.max((sink - brute).abs());
            count += 1;
        }
    }
    let t = secs(start.elapsed());
    verdict(worst <= 1e-4 && t < 5.0, format!("max |Δ| = {worst:.2e} over {count} instances, {t:.2} s"))
}

fn waterfilling_identity() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..10u64 {
        let d = 2 + (k % 4) as usize;
        let mut m = random_psd(d, 300 + k).unwrap().into_matrix();
        for i in 0..d {
            m[(i, i)] += 0.1;
        }
        let ky = SymMatrix::new(m).unwrap();
        let lambda_min = sym_eig(&ky).unwrap().eigenvalues[d - 1];
        let lambda = 1.5 * lambda_min;
        let fit = soft_threshold_pca(&ky, d, lambda).unwrap();
        let pair = gaussian_entropic_w2(
            &GaussianMeasure::centered(fit).unwrap(),
            &GaussianMeasure::centered(ky.clone()).unwrap(),
            lambda,
        )
        .unwrap();
        let value = entropic_population_value(&ky, d, lambda).unwrap();
        worst = worst.max((pair - value).abs());
    }
    let t = secs(start.elapsed());
    verdict(worst <= 1e-8 && t < 1.0, format!("max |Δ| = {worst:.2e} over 10 targets, {t:.3} s"))
}

fn divergence_debiasing() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..10u64 {
        let n = 5 + 5 * k as usize;
        let p = weighted_cloud(n, 1 + (k % 3) as usize, 400 + k);
        for lambda in [0.5, 2.0] {
            let s = sinkhorn_divergence_discrete(&p, &p, &SinkhornParams::new(lambda)).unwrap();
            worst = worst.max(s.abs());
        }
    }
    let t = secs(start.elapsed());
    verdict(worst <= 1e-8 && t < 10.0, format!("max |S(P,P)| = {worst:.2e}, {t:.2} s"))
}

fn uniform_rows(points: DMatrix<f64>) -> DiscreteMeasure {
    DiscreteMeasure::uniform(points).unwrap()
}

fn finite_difference(g: &DMatrix<f64>, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(g.nrows(), g.ncols(), |i, k| {
        let mut plus = g.clone();
        let mut minus = g.clone();
        plus[(i, k)] += FD_STEP;
        minus[(i, k)] -= FD_STEP;
        (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
    })
}

fn relative_error(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).norm() / want.norm().max(1e-12)
}

fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let (mut entropic_worst, mut sinkhorn_worst, mut unit_best) = (0.0f64, 0.0f64, f64::INFINITY);
    for k in 0..20u64 {
        let d = 1 + (k % 3) as usize;
        let r = 1 + (k % 2) as usize;
        let s = 4 + (k % 4) as usize;
        let lambda = [0.5, 1.0, 2.0][(k % 3) as usize];
        let params = SinkhornParams::new(lambda).with_tol(FD_TOL);
        let g = LinearGenerator::random(d, r, 600 + k).unwrap();
        let x = gaussian_cloud(identity(r), s, 700 + k).points().clone_owned();
        let y = gaussian_cloud(random_psd(d, 800 + k).unwrap(), s + 1, 900 + k).points().clone_owned();
        let target = uniform_rows(y.clone());
        let entropic = |h: &DMatrix<f64>| {
            entropic_w2_discrete(&uniform_rows(&x * h.transpose()), &target, &params).unwrap()
        };
        let divergence = |h: &DMatrix<f64>| {
            sinkhorn_divergence_discrete(&uniform_rows(&x * h.transpose()), &target, &params).unwrap()
        };

        let cross = entropic_grad(&g, &x, &y, &params).unwrap();
        let fd = finite_difference(g.matrix(), entropic);
        entropic_worst = entropic_worst.max(relative_error(&cross, &fd));

        let full = sinkhorn_grad(&g, &x, &x, &y, &params).unwrap();
        let fd = finite_difference(g.matrix(), divergence);
        sinkhorn_worst = sinkhorn_worst.max(relative_error(&full, &fd));

        // The self term recovered from both estimators, reweighted with 1.
        let own = (&cross - &full) / SELF_TERM_COEFFICIENT;
        unit_best = unit_best.min(relative_error(&(&cross - &own), &fd));
    }
    let t = secs(start.elapsed());
    let pass = entropic_worst <= 1e-3
        && sinkhorn_worst <= 1e-3
        && SELF_TERM_COEFFICIENT == 0.5
        && unit_best > 1e-3
        && t < 120.0;
    verdict(
        pass,
        format!(
            "entropic {entropic_worst:.2e}, sinkhorn {sinkhorn_worst:.2e}, self-term coefficient \
             {SELF_TERM_COEFFICIENT} (coefficient 1 misses by ≥ {unit_best:.2e}), {t:.1} s"
        ),
    )
}

struct Workspace {
    root: PathBuf,
}

struct Run {
    out: PathBuf,
    elapsed: f64,
    ok: bool,
    stderr: String,
}

impl Workspace {
    fn spec(&self, name: &str, json: &str) -> PathBuf {
        let path = self.root.join(format!("{name}.json"));
        fs::write(&path, json).unwrap();
        path
    }

    fn run(&self, command: &str, spec: &Path, out: &str, threads: usize) -> Run {
        let out = self.root.join(out);
        let start = Instant::now();
        let o = Command::new(env!("CARGO_BIN_EXE_egan"))
            .args([command, "--config"])
            .arg(spec)
            .arg("--out")
            .arg(&out)
            .args(["--threads", &threads.to_string()])
            .output()
            .expect("binary runs");
        Run {
            out,
            elapsed: secs(start.elapsed()),
            ok: o.status.success(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }
    }
}

fn summary(run: &Run) -> Value {
    serde_json::from_str(&fs::read_to_string(run.out.join("summary.json")).unwrap()).unwrap()
}

fn failed(run: &Run) -> Verdict {
    verdict(false, format!("run failed: {}", run.stderr.trim()))
}

fn runs(s: &Value) -> &Vec<Value> {
    s["runs"].as_array().unwrap()
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

/// Tr(GGᵀ) ≤ 1.1 · Tr K̂_Y for every run that finished.
fn trace_bound(s: &Value) -> (bool, f64) {
    let mut worst: f64 = 0.0;
    for r in runs(s).iter().filter(|r| r["aborted"].is_null()) {
        worst = worst.max(num(&r["generator_trace"]) / num(&r["empirical_target_trace"]));
    }
    (worst <= 1.1, worst)
}

fn thm1(run: &Run) -> Verdict {
    if !run.ok {
        return failed(run);
    }
    let s = summary(run);
    let g2 = num(&runs(&s)[0]["generator_trace"]);
    verdict(
        (0.40..=0.60).contains(&g2) && run.elapsed < 120.0,
        format!("g² = {g2:.4} (analytic 0.5), {:.1} s", run.elapsed),
    )
}

fn thm2(run: &Run) -> Verdict {
    if !run.ok {
        return failed(run);
    }
    let s = summary(run);
    let dist = num(&runs(&s)[0]["final"]["dist_to_rpca"]);
    verdict(
        dist <= 0.1 && run.elapsed < 900.0,
        format!("‖GGᵀ − r_pca‖_F = {dist:.4} (≤ 0.1), {:.0} s", run.elapsed),
    )
}

fn fig1(run: &Run) -> Verdict {
    if !run.ok {
        return failed(run);
    }
    let s = summary(run);
    let schema = read_csv(&run.out.join("metrics.csv")).is_ok();
    let mut pass = schema;
    let mut parts = Vec::new();
    for r in runs(&s) {
        let rank = r["r"].as_u64().unwrap() as usize;
        let initial = num(&r["initial"]["dist_to_rpca"]);
        let last = num(&r["final"]["dist_to_rpca"]);
        let floor = FIG1_FLOOR.iter().find(|(k, _)| *k == rank).map(|(_, f)| *f).unwrap_or(f64::NAN);
        let elapsed = num(&r["elapsed_secs"]);
        pass &= last <= 0.5 * initial && last <= FLOOR_SLACK * floor && elapsed < 1800.0;
        parts.push(format!(
            "r={rank}: {initial:.3} → {last:.4} ({:.0}%, floor {floor:.4}), {elapsed:.0} s",
            100.0 * last / initial
        ));
    }
    verdict(pass, format!("{}; schema {}", parts.join("; "), if schema { "ok" } else { "invalid" }))
}

fn sweep(d2: &Run, d4: &Run) -> Verdict {
    if !d2.ok {
        return failed(d2);
    }
    if !d4.ok {
        return failed(d4);
    }
    let (s2, s4) = (num(&summary(d2)["slope"]), num(&summary(d4)["slope"]));
    let elapsed = d2.elapsed + d4.elapsed;
    verdict(
        s2 <= -0.3 && s4 <= -0.3 && (s2 - s4).abs() <= 0.25 && elapsed < 1800.0,
        format!("slope d=2 {s2:.3}, d=4 {s4:.3}, |Δ| = {:.3}, {elapsed:.0} s", (s2 - s4).abs()),
    )
}

fn traces(runs: &[&Run]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for run in runs {
        if !run.ok {
            return failed(run);
        }
        let (ok, worst) = trace_bound(&summary(run));
        pass &= ok;
        parts.push(format!("{worst:.3}"));
    }
    verdict(pass, format!("max Tr(GGᵀ)/Tr K̂_Y per experiment: {}", parts.join(", ")))
}

fn identical(a: &Run, b: &Run) -> bool {
    let read = |r: &Run| fs::read(r.out.join("metrics.csv")).ok();
    a.ok && b.ok && read(a).is_some() && read(a) == read(b)
}

fn report(number: usize, name: &str, v: &Verdict) {
    println!("{} {number:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
}

fn main() {
    // Accept the flags cargo forwards to test harnesses; `--list` must list nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut verdicts = Vec::new();
    let mut record = |number, name, v: Verdict| {
        report(number, name, &v);
        verdicts.push(v.pass);
    };

    record(1, "oracle equivalence", oracle_equivalence());
    record(2, "waterfilling identity", waterfilling_identity());
    record(3, "divergence debiasing", divergence_debiasing());
    record(4, "gradient checks", gradient_checks());

    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace { root: dir.path().to_path_buf() };
    let seed = ACCEPTANCE_SEED;
    let specs = [
        (
            "thm1-verify",
            ws.spec(
                "thm1",
                &format!(
                    r#"{{"kind": "thm1-verify", "id": "thm1", "seed": {seed}, "d": 1, "r": 1, "lambda": 1.0,
                        "loss": "entropic", "batch_size": 100, "iterations": 2000, "n": 10000,
                        "target": {{"type": "diagonal", "values": [1.0]}}}}"#
                ),
            ),
            "thm1",
        ),
        (
            "train",
            ws.spec(
                "thm2",
                &format!(
                    r#"{{"kind": "train", "id": "thm2", "seed": {seed}, "d": 4, "r": 2, "lambda": 0.05,
                        "loss": "sinkhorn", "batch_size": 200, "iterations": 10000, "n": 10000,
                        "target": {{"type": "diagonal", "values": [0.6, 0.3, 0.07, 0.03], "normalize": true}}}}"#
                ),
            ),
            "thm2",
        ),
        (
            "fig1",
            ws.spec(
                "fig1",
                &format!(
                    r#"{{"kind": "fig1", "id": "fig1", "seed": {seed}, "d": 32, "r_values": [4, 8], "lambda": 0.1,
                        "loss": "sinkhorn", "batch_size": 200, "iterations": 10000, "n": 10000}}"#
                ),
            ),
            "fig1",
        ),
        (
            "gen-sweep",
            ws.spec(
                "sweep-d2",
                &format!(
                    r#"{{"kind": "gen-sweep", "id": "sweep-d2", "seed": {seed}, "d": 2, "r": 2, "lambda": 1.0,
                        "sweep": {{"n": [250, 500, 1000, 2000, 4000], "repetitions": 3}}}}"#
                ),
            ),
            "sweep-d2",
        ),
        (
            "gen-sweep",
            ws.spec(
                "sweep-d4",
                &format!(
                    r#"{{"kind": "gen-sweep", "id": "sweep-d4", "seed": {seed}, "d": 4, "r": 4, "lambda": 1.0,
                        "sweep": {{"n": [250, 500, 1000, 2000, 4000], "repetitions": 3}}}}"#
                ),
            ),
            "sweep-d4",
        ),
    ];
    let first: Vec<Run> = specs.iter().map(|(cmd, spec, out)| ws.run(cmd, spec, out, 1)).collect();

    record(5, "entropic training at d = r = 1", thm1(&first[0]));
    record(6, "sinkhorn training recovers r-PCA", thm2(&first[1]));
    record(7, "figure-1 contraction", fig1(&first[2]));
    record(8, "generalization sweep", sweep(&first[3], &first[4]));
    record(9, "trace bound", traces(&[&first[0], &first[1], &first[2]]));

    let second: Vec<Run> = specs
        .iter()
        .map(|(cmd, spec, out)| ws.run(cmd, spec, &format!("{out}-rerun"), 2))
        .collect();
    let mismatched: Vec<&str> = specs
        .iter()
        .zip(first.iter().zip(&second))
        .filter(|(_, (a, b))| !identical(a, b))
        .map(|((_, _, out), _)| *out)
        .collect();
    record(
        10,
        "determinism across --threads",
        verdict(
            mismatched.is_empty(),
            if mismatched.is_empty() {
                format!("{} experiments byte-identical with 1 and 2 threads", specs.len())
            } else {
                format!("metrics differ for {}", mismatched.join(", "))
            },
        ),
    );

    let failures = verdicts.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", verdicts.len() - failures, verdicts.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
