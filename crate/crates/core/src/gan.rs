//! Stochastic gradient training of a linear generator `x ↦ G x` against a
//! discrete target, with the dual potentials of every minibatch problem
//! computed by Sinkhorn (no discriminator network).
//!
//! Both gradient estimators differentiate the batch loss through the cost
//! matrix only: at the optimal coupling `π` the envelope theorem gives
//! `∇_G W²_λ = Σ_ij π_ij ∇_G C_ij`. For the Sinkhorn divergence the
//! self-transport term contributes with coefficient [`SELF_TERM_COEFFICIENT`].

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::linalg::SymMatrix;
use crate::measure::DiscreteMeasure;
use crate::ot::{entropic_transport, self_transport, DualPotentials, SinkhornParams, SymmetricPotential};
use crate::rng;

/// Weight of the self-transport gradient in the Sinkhorn-divergence
/// gradient. The divergence subtracts `W²_λ(P_G, P_G) / 2`, and the envelope
/// gradient of `W²_λ(P_G, P_G)` already accounts for both arguments moving.
pub const SELF_TERM_COEFFICIENT: f64 = 0.5;

/// Matrix `G` (d×r) of a linear generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGenerator {
    matrix: DMatrix<f64>,
}

impl LinearGenerator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(invalid("generator matrix must be non-empty"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid("generator matrix has non-finite entries"));
        }
        Ok(LinearGenerator { matrix })
    }

    /// Entries i.i.d. `N(0, 1/d)`.
    pub fn random(d: usize, r: usize, seed: u64) -> Result<Self> {
        if d == 0 || r == 0 {
            return Err(invalid("generator dimensions must be positive"));
        }
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let mut rng = rng::stream(seed, rng::streams::INIT);
        let mut m = DMatrix::zeros(d, r);
        for i in 0..d {
            for k in 0..r {
                m[(i, k)] = normal.sample(&mut rng);
            }
        }
        Self::new(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Output dimension `d`.
    pub fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Latent dimension `r`.
    pub fn latent_dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Maps latent rows (S×r) to generated rows (S×d).
    pub fn apply(&self, latent: &DMatrix<f64>) -> DMatrix<f64> {
        latent * self.matrix.transpose()
    }
}

/// Exact covariance `G Gᵀ` of `G X` for standard-normal `X`.
pub fn generator_output_cov(g: &LinearGenerator) -> SymMatrix {
    SymMatrix::new(&g.matrix * g.matrix.transpose()).expect("finite generator")
}

pub fn cov_frobenius(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    Ok((a.as_matrix() - b.as_matrix()).norm())
}

fn check_batches(g: &LinearGenerator, x: &DMatrix<f64>, y: Option<&DMatrix<f64>>) -> Result<()> {
    if x.nrows() == 0 || x.ncols() != g.latent_dim() {
        return Err(invalid(format!(
            "latent batch is {}x{}, generator expects r = {}",
            x.nrows(),
            x.ncols(),
            g.latent_dim()
        )));
    }
    if let Some(y) = y {
        if y.nrows() == 0 || y.ncols() != g.output_dim() {
            return Err(invalid(format!(
                "data batch is {}x{}, generator outputs d = {}",
                y.nrows(),
                y.ncols(),
                g.output_dim()
            )));
        }
    }
    Ok(())
}

struct CrossTerm {
    gradient: DMatrix<f64>,
    value: f64,
    potentials: DualPotentials,
}

struct SelfTerm {
    /// Gradient of `W²_λ(P_G, P_G)` itself (coefficient 1).
    gradient: DMatrix<f64>,
    value: f64,
    potential: SymmetricPotential,
}

fn cross_term(
    g: &LinearGenerator,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    params: &SinkhornParams,
    warm: Option<&DualPotentials>,
) -> Result<CrossTerm> {
    let z = g.apply(x);
    let src = DiscreteMeasure::uniform(z.clone())?;
    let tgt = DiscreteMeasure::uniform(y.clone())?;
    let t = entropic_transport(&src, &tgt, params, warm)?;
    let pi = &t.coupling;
    // residual_i = Σ_j π_ij (z_i − y_j)
    let mut residual = DMatrix::zeros(z.nrows(), z.ncols());
    for i in 0..z.nrows() {
        let row = pi.row(i);
        let mass: f64 = row.iter().sum();
        for k in 0..z.ncols() {
            let mut pull = 0.0;
            for (j, p) in row.iter().enumerate() {
                pull += p * y[(j, k)];
            }
            residual[(i, k)] = mass * z[(i, k)] - pull;
        }
    }
    Ok(CrossTerm {
        gradient: residual.transpose() * x * 2.0,
        value: t.value,
        potentials: t.potentials,
    })
}

fn self_term(
    g: &LinearGenerator,
    x: &DMatrix<f64>,
    params: &SinkhornParams,
    warm: Option<&SymmetricPotential>,
) -> Result<SelfTerm> {
    let z = g.apply(x);
    let st = self_transport(&DiscreteMeasure::uniform(z)?, params, warm)?;
    let pi = &st.coupling;
    let s = x.nrows();
    // M = Σ_ij π_ij (x_i − x_j)(x_i − x_j)ᵀ
    //   = Xᵀ diag(rows + cols) X − Xᵀ Π X − Xᵀ Πᵀ X
    let rows = pi.row_sums();
    let cols = pi.col_sums();
    let pi_mat = DMatrix::from_row_slice(s, s, pi.as_slice());
    let weighted = DMatrix::from_fn(s, x.ncols(), |i, k| (rows[i] + cols[i]) * x[(i, k)]);
    let cross = x.transpose() * &pi_mat * x;
    let m = x.transpose() * weighted - &cross - cross.transpose();
    Ok(SelfTerm {
        gradient: g.matrix() * m * 2.0,
        value: st.value,
        potential: st.potential,
    })
}

/// Gradient of `W²_λ(P_{G x}, P_y)` for uniform batches:
/// `Σ_ij π_ij · 2 (G x_i − y_j) x_iᵀ` at the batch coupling.
pub fn entropic_grad(
    g: &LinearGenerator,
    batch_x: &DMatrix<f64>,
    batch_y: &DMatrix<f64>,
    params: &SinkhornParams,
) -> Result<DMatrix<f64>> {
    check_batches(g, batch_x, Some(batch_y))?;
    Ok(cross_term(g, batch_x, batch_y, params, None)?.gradient)
}

/// Gradient of the batch Sinkhorn divergence: the cross term on
/// `(G x1, y)` minus [`SELF_TERM_COEFFICIENT`] times
/// `Σ_ij π^x_ij · 2 G (x_i − x_j)(x_i − x_j)ᵀ` from the self-transport of
/// `G x2`. With `x1 == x2` this is the exact gradient of
/// `S_λ(P_{G x}, P_y)`.
pub fn sinkhorn_grad(
    g: &LinearGenerator,
    batch_x1: &DMatrix<f64>,
    batch_x2: &DMatrix<f64>,
    batch_y: &DMatrix<f64>,
    params: &SinkhornParams,
) -> Result<DMatrix<f64>> {
    check_batches(g, batch_x1, Some(batch_y))?;
    check_batches(g, batch_x2, None)?;
    let cross = cross_term(g, batch_x1, batch_y, params, None)?;
    let own = self_term(g, batch_x2, params, None)?;
    Ok(cross.gradient - own.gradient * SELF_TERM_COEFFICIENT)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Entropic,
    Sinkhorn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `α / √(t + 1)` at zero-based iteration `t`.
    InvSqrt(f64),
}

impl StepSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant(a) => a,
            StepSchedule::InvSqrt(a) => a / ((t + 1) as f64).sqrt(),
        }
    }

    fn base(&self) -> f64 {
        match *self {
            StepSchedule::Constant(a) | StepSchedule::InvSqrt(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSampling {
    WithReplacement,
    /// Walk a fresh permutation of the data each epoch.
    EpochShuffle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSeeds {
    /// Seed of the dataset itself; recorded here, consumed by dataset builders.
    pub data: u64,
    pub init: u64,
    pub batches: u64,
}

impl TrainSeeds {
    pub fn from_base(seed: u64) -> Self {
        TrainSeeds {
            data: rng::derive_seed(seed, 0),
            init: rng::derive_seed(seed, 1),
            batches: rng::derive_seed(seed, 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub r: usize,
    pub lambda: f64,
    pub loss: LossKind,
    pub batch_size: usize,
    pub iterations: usize,
    pub step: StepSchedule,
    pub tol: f64,
    pub max_iter: usize,
    pub seeds: TrainSeeds,
    pub log_every: usize,
    pub warm_start: bool,
    pub sampling: DataSampling,
    /// Replace each batch gradient `∇_S` by `2 ∇_S − (∇_{S/2} + ∇'_{S/2}) / 2`,
    /// the halves being the first and second half of the same batch. This
    /// cancels the `O(1/S)` bias of minibatch transport gradients.
    pub batch_extrapolation: bool,
}

impl TrainConfig {
    pub const DEFAULT_STEP: f64 = 0.05;

    pub fn new(d: usize, r: usize, lambda: f64, loss: LossKind) -> Self {
        TrainConfig {
            d,
            r,
            lambda,
            loss,
            batch_size: 200,
            iterations: 1000,
            step: StepSchedule::Constant(Self::DEFAULT_STEP),
            tol: SinkhornParams::DEFAULT_TOL,
            max_iter: SinkhornParams::DEFAULT_MAX_ITER,
            seeds: TrainSeeds::from_base(0),
            log_every: 100,
            warm_start: false,
            sampling: DataSampling::WithReplacement,
            batch_extrapolation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.r == 0 {
            return Err(invalid("d and r must be positive"));
        }
        if self.batch_size < 2 {
            return Err(invalid(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be at least 1"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        let base = self.step.base();
        if !(base > 0.0 && base.is_finite()) {
            return Err(invalid(format!("step size must be positive, got {base}")));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(invalid("sinkhorn tol and max_iter must be positive"));
        }
        if self.batch_extrapolation && (self.batch_size < 4 || !self.batch_size.is_multiple_of(2)) {
            return Err(invalid(format!(
                "batch extrapolation needs an even batch of at least 4, got {}",
                self.batch_size
            )));
        }
        if self.log_every == 0 {
            return Err(invalid("log_every must be at least 1"));
        }
        Ok(())
    }

    pub fn sinkhorn(&self) -> SinkhornParams {
        SinkhornParams {
            lambda: self.lambda,
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Batch loss at the generator before this iteration's update.
    pub loss: f64,
    pub grad_norm: f64,
    pub dist_to_reference: Option<f64>,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<IterationRecord>,
    pub generator: LinearGenerator,
    /// Iterations skipped because Sinkhorn did not converge.
    pub skipped: usize,
}

impl TrainTrace {
    /// Records with wall-clock stripped, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainTrace {
        let mut t = self.clone();
        t.records.iter_mut().for_each(|r| r.elapsed_secs = 0.0);
        t
    }
}

const MAX_CONSECUTIVE_FAILURES: usize = 3;

struct BatchSampler {
    latent: ChaCha8Rng,
    index: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    sampling: DataSampling,
}

impl BatchSampler {
    fn new(seed: u64, n: usize, sampling: DataSampling) -> Self {
        BatchSampler {
            latent: rng::stream(seed, rng::streams::LATENT),
            index: rng::stream(seed, rng::streams::DATA_INDEX),
            order: (0..n).collect(),
            cursor: n,
            sampling,
        }
    }

    fn latent(&mut self, s: usize, r: usize) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(s, r);
        for i in 0..s {
            for k in 0..r {
                x[(i, k)] = StandardNormal.sample(&mut self.latent);
            }
        }
        x
    }

    fn data(&mut self, data: &DMatrix<f64>, s: usize) -> DMatrix<f64> {
        let n = data.nrows();
        let mut y = DMatrix::zeros(s, data.ncols());
        for i in 0..s {
            let idx = match self.sampling {
                DataSampling::WithReplacement => self.index.random_range(0..n),
                DataSampling::EpochShuffle => {
                    if self.cursor == n {
                        self.order.shuffle(&mut self.index);
                        self.cursor = 0;
                    }
                    self.cursor += 1;
                    self.order[self.cursor - 1]
                }
            };
            y.set_row(i, &data.row(idx));
        }
        y
    }
}

/// Cold-start gradient of the configured loss on one batch.
fn batch_gradient(
    cfg: &TrainConfig,
    g: &LinearGenerator,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    params: &SinkhornParams,
) -> Result<DMatrix<f64>> {
    let cross = cross_term(g, x, y, params, None)?.gradient;
    Ok(match cfg.loss {
        LossKind::Entropic => cross,
        LossKind::Sinkhorn => cross - self_term(g, x, params, None)?.gradient * SELF_TERM_COEFFICIENT,
    })
}

fn half_batch_gradient(
    cfg: &TrainConfig,
    g: &LinearGenerator,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    params: &SinkhornParams,
) -> Result<DMatrix<f64>> {
    let h = x.nrows() / 2;
    let first = batch_gradient(cfg, g, &x.rows(0, h).into_owned(), &y.rows(0, h).into_owned(), params)?;
    let second = batch_gradient(cfg, g, &x.rows(h, h).into_owned(), &y.rows(h, h).into_owned(), params)?;
    Ok((first + second) * 0.5)
}

pub fn train_sgd(cfg: &TrainConfig, data: &DiscreteMeasure, reference: Option<&SymMatrix>) -> Result<TrainTrace> {
    train_sgd_observed(cfg, data, reference, None, &mut |_, _| {})
}

/// Runs the configured number of SGD iterations. `observer` sees every
/// logged record together with the generator it was measured on. `init`
/// overrides the seeded random initialization.
pub fn train_sgd_observed(
    cfg: &TrainConfig,
    data: &DiscreteMeasure,
    reference: Option<&SymMatrix>,
    init: Option<&LinearGenerator>,
    observer: &mut dyn FnMut(&IterationRecord, &LinearGenerator),
) -> Result<TrainTrace> {
    cfg.validate()?;
    if data.dim() != cfg.d {
        return Err(invalid(format!("data has dimension {}, config says d = {}", data.dim(), cfg.d)));
    }
    if let Some(k) = reference {
        if k.dim() != cfg.d {
            return Err(invalid("reference covariance has the wrong dimension"));
        }
    }
    let mut generator = match init {
        Some(g) if g.output_dim() == cfg.d && g.latent_dim() == cfg.r => g.clone(),
        Some(_) => return Err(invalid("initial generator has the wrong shape")),
        None => LinearGenerator::random(cfg.d, cfg.r, cfg.seeds.init)?,
    };
    let params = cfg.sinkhorn();
    let mut sampler = BatchSampler::new(cfg.seeds.batches, data.len(), cfg.sampling);
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut failures = 0;
    let mut warm_cross: Option<DualPotentials> = None;
    let mut warm_self: Option<SymmetricPotential> = None;
    let start = Instant::now();

    let abort = |iteration: usize, reason: String, records: Vec<IterationRecord>, generator: LinearGenerator, skipped| {
        Error::TrainingAborted {
            iteration,
            reason,
            trace: Box::new(TrainTrace {
                records,
                generator,
                skipped,
            }),
        }
    };

    for t in 0..cfg.iterations {
        let x = sampler.latent(cfg.batch_size, cfg.r);
        let y = sampler.data(data.points(), cfg.batch_size);
        let logged = t % cfg.log_every == 0 || t + 1 == cfg.iterations;

        let step = (|| -> Result<(DMatrix<f64>, f64)> {
            let cross = cross_term(&generator, &x, &y, &params, warm_cross.as_ref().filter(|_| cfg.warm_start))?;
            let out = match cfg.loss {
                LossKind::Entropic => {
                    warm_cross = Some(cross.potentials);
                    (cross.gradient, cross.value)
                }
                LossKind::Sinkhorn => {
                    let own = self_term(&generator, &x, &params, warm_self.as_ref().filter(|_| cfg.warm_start))?;
                    let grad = cross.gradient - &own.gradient * SELF_TERM_COEFFICIENT;
                    let loss = if logged {
                        let target = self_transport(&DiscreteMeasure::uniform(y.clone())?, &params, None)?;
                        cross.value - 0.5 * (own.value + target.value)
                    } else {
                        f64::NAN
                    };
                    warm_cross = Some(cross.potentials);
                    warm_self = Some(own.potential);
                    (grad, loss)
                }
            };
            if cfg.batch_extrapolation {
                let halves = half_batch_gradient(cfg, &generator, &x, &y, &params)?;
                return Ok((out.0 * 2.0 - halves, out.1));
            }
            Ok(out)
        })();

        let (grad, loss) = match step {
            Ok(v) => {
                failures = 0;
                v
            }
            Err(Error::NonConvergence { marginal_error, .. }) => {
                failures += 1;
                skipped += 1;
                if failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(abort(
                        t,
                        format!("sinkhorn failed {failures} times in a row (marginal error {marginal_error:e})"),
                        records,
                        generator,
                        skipped,
                    ));
                }
                continue;
            }
            Err(e) => return Err(e),
        };

        let grad_norm = grad.norm();
        if !grad_norm.is_finite() || (logged && !loss.is_finite()) {
            return Err(abort(t, format!("non-finite loss {loss} or gradient norm {grad_norm}"), records, generator, skipped));
        }
        if logged {
            let dist_to_reference = match reference {
                Some(k) => Some(cov_frobenius(&generator_output_cov(&generator), k)?),
                None => None,
            };
            let record = IterationRecord {
                iteration: t,
                loss,
                grad_norm,
                dist_to_reference,
                elapsed_secs: start.elapsed().as_secs_f64(),
            };
            observer(&record, &generator);
            records.push(record);
        }
        let updated = generator.matrix() - grad * cfg.step.at(t);
        generator = LinearGenerator::new(updated).map_err(|_| {
            abort(t, "generator became non-finite".into(), records.clone(), generator.clone(), skipped)
        })?;
    }

    Ok(TrainTrace {
        records,
        generator,
        skipped,
    })
}
