//! Experiment specifications: one JSON document per run, unknown keys
//! rejected, every omitted field filled from per-kind defaults.

use std::path::{Path, PathBuf};

use egan_core::{DataSampling, LossKind, StepSchedule, TrainConfig, TrainSeeds};
use serde::{Deserialize, Serialize};

use crate::error::{config, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Population,
    Train,
    Thm1Verify,
    Fig1,
    GenSweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Population => "population",
            ExperimentKind::Train => "train",
            ExperimentKind::Thm1Verify => "thm1-verify",
            ExperimentKind::Fig1 => "fig1",
            ExperimentKind::GenSweep => "gen-sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Entropic,
    Sinkhorn,
}

impl From<LossName> for LossKind {
    fn from(l: LossName) -> Self {
        match l {
            LossName::Entropic => LossKind::Entropic,
            LossName::Sinkhorn => LossKind::Sinkhorn,
        }
    }
}

impl std::str::FromStr for LossName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "entropic" => Ok(LossName::Entropic),
            "sinkhorn" => Ok(LossName::Sinkhorn),
            other => Err(format!("unknown loss '{other}', expected entropic or sinkhorn")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSpec {
    Constant(f64),
    InvSqrt(f64),
}

impl From<StepSpec> for StepSchedule {
    fn from(s: StepSpec) -> Self {
        match s {
            StepSpec::Constant(a) => StepSchedule::Constant(a),
            StepSpec::InvSqrt(a) => StepSchedule::InvSqrt(a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingName {
    WithReplacement,
    EpochShuffle,
}

impl From<SamplingName> for DataSampling {
    fn from(s: SamplingName) -> Self {
        match s {
            SamplingName::WithReplacement => DataSampling::WithReplacement,
            SamplingName::EpochShuffle => DataSampling::EpochShuffle,
        }
    }
}

/// Where the target covariance (and, for training, the data) comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// `random_psd(d, data_seed)`, Frobenius norm 1.
    RandomPsd {},
    /// `I + random_psd(d, data_seed)`: every eigenvalue lies in `[1, 2]`.
    ShiftedRandomPsd {},
    Diagonal {
        values: Vec<f64>,
        #[serde(default)]
        normalize: bool,
    },
    Matrix {
        rows: Vec<Vec<f64>>,
    },
    /// Points and covariance from a file written by `gen-data`.
    Dataset {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Dataset sizes, strictly increasing.
    pub n: Vec<usize>,
    pub repetitions: usize,
    /// Sample size per side of the held-out discrete gap estimate.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
}

fn default_holdout() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    pub data: u64,
    pub init: u64,
    pub batches: u64,
}

/// File form of [`ExperimentSpec`]: everything but `kind` and `seed` may be
/// omitted.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    kind: Option<ExperimentKind>,
    seed: Option<u64>,
    id: Option<String>,
    d: Option<usize>,
    r: Option<usize>,
    r_values: Option<Vec<usize>>,
    lambda: Option<f64>,
    loss: Option<LossName>,
    batch_size: Option<usize>,
    iterations: Option<usize>,
    step: Option<StepSpec>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    log_every: Option<usize>,
    warm_start: Option<bool>,
    sampling: Option<SamplingName>,
    batch_extrapolation: Option<bool>,
    n: Option<usize>,
    seeds: Option<SeedSpec>,
    target: Option<TargetSpec>,
    sweep: Option<SweepSpec>,
    tail_average: Option<f64>,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Label written to the `experiment` column of every metric row.
    pub id: String,
    pub seed: u64,
    pub seeds: SeedSpec,
    pub d: usize,
    /// Latent dimensions to train; one run each (fig1 sweeps several).
    pub r_values: Vec<usize>,
    pub lambda: f64,
    pub loss: LossName,
    pub batch_size: usize,
    pub iterations: usize,
    pub step: StepSpec,
    pub tol: f64,
    pub max_iter: usize,
    pub log_every: usize,
    pub warm_start: bool,
    pub sampling: SamplingName,
    pub batch_extrapolation: bool,
    pub n: usize,
    pub target: TargetSpec,
    pub sweep: Option<SweepSpec>,
    /// Fraction of final iterations whose output covariances are averaged
    /// into the fitted generator (gen-sweep only; 0 keeps the last iterate).
    pub tail_average: f64,
    pub out: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub d: Option<usize>,
    pub r: Option<usize>,
    pub n: Option<usize>,
    pub batch: Option<usize>,
    pub iters: Option<usize>,
    pub loss: Option<LossName>,
    pub tol: Option<f64>,
}

fn seeds_from_base(seed: u64) -> SeedSpec {
    let s = TrainSeeds::from_base(seed);
    SeedSpec {
        data: s.data,
        init: s.init,
        batches: s.batches,
    }
}

impl ExperimentSpec {
    /// Defaults for `kind`, matching the desk-scale protocol of each driver.
    pub fn defaults(kind: ExperimentKind, seed: u64) -> Self {
        let (d, r, lambda, loss, iterations) = match kind {
            ExperimentKind::Population => (4, 2, 1.0, LossName::Entropic, 1),
            ExperimentKind::Train => (4, 2, 0.1, LossName::Sinkhorn, 1000),
            ExperimentKind::Thm1Verify => (1, 1, 1.0, LossName::Entropic, 2000),
            ExperimentKind::Fig1 => (32, 4, 0.1, LossName::Sinkhorn, 25_000),
            ExperimentKind::GenSweep => (2, 2, 1.0, LossName::Entropic, 1000),
        };
        let r_values = if kind == ExperimentKind::Fig1 { vec![4, 8] } else { vec![r] };
        let (n, target) = match kind {
            ExperimentKind::Thm1Verify => (10_000, TargetSpec::Diagonal { values: vec![1.0], normalize: false }),
            ExperimentKind::GenSweep => (0, TargetSpec::ShiftedRandomPsd {}),
            _ => (10_000, TargetSpec::RandomPsd {}),
        };
        let sweep = (kind == ExperimentKind::GenSweep).then(|| SweepSpec {
            n: vec![250, 500, 1000, 2000, 4000],
            repetitions: 3,
            holdout: default_holdout(),
        });
        ExperimentSpec {
            kind,
            id: kind.name().to_string(),
            seed,
            seeds: seeds_from_base(seed),
            d,
            r_values,
            lambda,
            loss,
            batch_size: if kind == ExperimentKind::Thm1Verify { 100 } else { 200 },
            iterations,
            step: if kind == ExperimentKind::GenSweep {
                StepSpec::InvSqrt(0.5)
            } else {
                StepSpec::Constant(TrainConfig::DEFAULT_STEP)
            },
            tol: egan_core::SinkhornParams::DEFAULT_TOL,
            max_iter: egan_core::SinkhornParams::DEFAULT_MAX_ITER,
            log_every: 100,
            warm_start: false,
            sampling: SamplingName::WithReplacement,
            batch_extrapolation: kind == ExperimentKind::GenSweep,
            n,
            target,
            sweep,
            tail_average: if kind == ExperimentKind::GenSweep { 0.5 } else { 0.0 },
            out: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawSpec = serde_json::from_str(text).map_err(|e| config(format!("invalid spec: {e}")))?;
        Self::from_raw(raw, None)
    }

    /// Reads a spec file. `expected` is the subcommand's kind; a file naming a
    /// different kind is rejected, one naming none adopts it.
    pub fn load(path: &Path, expected: Option<ExperimentKind>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let raw: RawSpec =
            serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
        Self::from_raw(raw, expected)
    }

    fn from_raw(raw: RawSpec, expected: Option<ExperimentKind>) -> Result<Self> {
        let kind = match (raw.kind, expected) {
            (Some(k), Some(e)) if k != e => {
                return Err(config(format!("spec is for '{}', not '{}'", k.name(), e.name())));
            }
            (Some(k), _) | (None, Some(k)) => k,
            (None, None) => return Err(config("spec has no 'kind'")),
        };
        let seed = raw.seed.ok_or_else(|| config("spec has no 'seed'"))?;
        let mut spec = Self::defaults(kind, seed);
        if let Some(v) = raw.id {
            spec.id = v;
        }
        if let Some(v) = raw.seeds {
            spec.seeds = v;
        }
        if let Some(v) = raw.d {
            spec.d = v;
        }
        match (raw.r, raw.r_values) {
            (Some(_), Some(_)) => return Err(config("give either 'r' or 'r_values', not both")),
            (Some(r), None) => spec.r_values = vec![r],
            (None, Some(rs)) => spec.r_values = rs,
            (None, None) => {}
        }
        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(v) = raw.$field { spec.$field = v; } )* };
        }
        take!(
            lambda, loss, batch_size, iterations, step, tol, max_iter, log_every, warm_start, sampling,
            batch_extrapolation, n, target, tail_average
        );
        if raw.sweep.is_some() {
            spec.sweep = raw.sweep;
        }
        spec.out = raw.out;
        Ok(spec)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.seeds = seeds_from_base(seed);
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = o.d {
            self.d = v;
        }
        if let Some(v) = o.r {
            self.r_values = vec![v];
        }
        if let Some(v) = o.lambda {
            self.lambda = v;
        }
        if let Some(v) = o.n {
            self.n = v;
        }
        if let Some(v) = o.batch {
            self.batch_size = v;
        }
        if let Some(v) = o.iters {
            self.iterations = v;
        }
        if let Some(v) = o.loss {
            self.loss = v;
        }
        if let Some(v) = o.tol {
            self.tol = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains([',', '\n', '"']) {
            return Err(config(format!("experiment id {:?} must be non-empty without commas or quotes", self.id)));
        }
        if self.d == 0 {
            return Err(config("d must be positive"));
        }
        if self.r_values.is_empty() {
            return Err(config("no latent dimension given"));
        }
        if let Some(r) = self.r_values.iter().find(|&&r| r == 0 || r > self.d) {
            return Err(config(format!("r = {r} outside 1..={}", self.d)));
        }
        let lambda_ok = if self.kind == ExperimentKind::Population {
            self.lambda >= 0.0
        } else {
            self.lambda > 0.0
        };
        if !(lambda_ok && self.lambda.is_finite()) {
            return Err(config(format!("lambda = {} out of range", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.tail_average) {
            return Err(config("tail_average must lie in [0, 1)"));
        }
        match &self.target {
            TargetSpec::Diagonal { values, .. } if values.len() != self.d => {
                return Err(config(format!("target has {} diagonal entries, d = {}", values.len(), self.d)));
            }
            TargetSpec::Matrix { rows } if rows.len() != self.d || rows.iter().any(|r| r.len() != self.d) => {
                return Err(config(format!("target matrix must be {0}x{0}", self.d)));
            }
            _ => {}
        }
        if self.kind == ExperimentKind::Population {
            return Ok(());
        }
        if self.kind == ExperimentKind::Thm1Verify && self.loss != LossName::Entropic {
            return Err(config("thm1-verify trains with the entropic loss"));
        }
        self.train_config(self.r_values[0]).validate()?;
        match self.kind {
            ExperimentKind::GenSweep => {
                let sweep = self.sweep.as_ref().ok_or_else(|| config("gen-sweep needs a 'sweep' grid"))?;
                if sweep.n.len() < 4 {
                    return Err(config("sweep grid needs at least 4 values of n"));
                }
                if sweep.n.windows(2).any(|w| w[0] >= w[1]) || sweep.n[0] == 0 {
                    return Err(config("sweep grid must be positive and strictly increasing"));
                }
                if sweep.repetitions < 3 {
                    return Err(config("sweep needs at least 3 repetitions"));
                }
                if sweep.holdout < 2 {
                    return Err(config("holdout must be at least 2"));
                }
                if matches!(self.target, TargetSpec::Dataset { .. }) {
                    return Err(config("gen-sweep draws its own datasets; a dataset target is not allowed"));
                }
            }
            _ => {
                if self.n == 0 && !matches!(self.target, TargetSpec::Dataset { .. }) {
                    return Err(config("n must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn train_seeds(&self) -> TrainSeeds {
        TrainSeeds {
            data: self.seeds.data,
            init: self.seeds.init,
            batches: self.seeds.batches,
        }
    }

    pub fn train_config(&self, r: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            iterations: self.iterations,
            step: self.step.into(),
            tol: self.tol,
            max_iter: self.max_iter,
            seeds: self.train_seeds(),
            log_every: self.log_every,
            warm_start: self.warm_start,
            sampling: self.sampling.into(),
            batch_extrapolation: self.batch_extrapolation,
            ..TrainConfig::new(self.d, r, self.lambda, self.loss.into())
        }
    }
}
