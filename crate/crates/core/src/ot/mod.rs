//! Entropic optimal transport between discrete measures with squared
//! Euclidean cost.
//!
//! The entropic distance between `P = Σ a_i δ_{x_i}` and `Q = Σ b_j δ_{y_j}` is
//!
//! ```text
//! W²_λ(P, Q) = min_π  Σ π_ij ‖x_i − y_j‖²  +  λ Σ π_ij ln(π_ij / (a_i b_j))
//! ```
//!
//! over couplings `π` with marginals `a` and `b`; the penalty is the mutual
//! information of `π` in nats. The optimal coupling is
//! `π_ij = a_i b_j exp((φ_i + ψ_j − C_ij) / λ)` for dual potentials `(φ, ψ)`,
//! which [`sinkhorn_potentials`] computes by alternating soft-min updates.

mod brute;
mod exact;
mod kernel;
mod newton;
mod sinkhorn;

pub use brute::brute_force_entropic;
pub use exact::{assignment, exact_w2};
pub use sinkhorn::{
    sinkhorn_potentials, sinkhorn_potentials_warm, sinkhorn_step, symmetric_potential,
    symmetric_potential_warm,
};

use crate::error::{invalid, Result};
use crate::measure::DiscreteMeasure;

/// Solver settings shared by every Sinkhorn call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    /// Regularization strength; carries units of squared distance.
    pub lambda: f64,
    /// Largest accepted total-variation violation of either marginal.
    pub tol: f64,
    pub max_iter: usize,
}

impl SinkhornParams {
    pub const DEFAULT_TOL: f64 = 1e-9;
    pub const DEFAULT_MAX_ITER: usize = 10_000;

    pub fn new(lambda: f64) -> Self {
        SinkhornParams {
            lambda,
            tol: Self::DEFAULT_TOL,
            max_iter: Self::DEFAULT_MAX_ITER,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(invalid(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Pairwise squared Euclidean distances, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    nrows: usize,
    ncols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn from_row_major(nrows: usize, ncols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != nrows * ncols || nrows == 0 || ncols == 0 {
            return Err(invalid("cost matrix shape mismatch"));
        }
        if entries.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(invalid("cost entries must be finite and nonnegative"));
        }
        Ok(CostMatrix {
            nrows,
            ncols,
            entries,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.ncols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> CostMatrix {
        let mut t = vec![0.0; self.entries.len()];
        for i in 0..self.nrows {
            for j in 0..self.ncols {
                t[j * self.nrows + i] = self.entries[i * self.ncols + j];
            }
        }
        CostMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            entries: t,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.nrows == self.ncols
            && (0..self.nrows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// `C_ij = Σ_k (x_ik − y_jk)²`, summed in coordinate order.
pub fn cost_matrix(src: &DiscreteMeasure, tgt: &DiscreteMeasure) -> Result<CostMatrix> {
    if src.dim() != tgt.dim() {
        return Err(invalid(format!(
            "dimension mismatch: source {} vs target {}",
            src.dim(),
            tgt.dim()
        )));
    }
    let (n, m, d) = (src.len(), tgt.len(), src.dim());
    let x = src.points();
    let y = tgt.points();
    let mut entries = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..d {
                let diff = x[(i, k)] - y[(j, k)];
                acc += diff * diff;
            }
            entries[i * m + j] = acc;
        }
    }
    Ok(CostMatrix {
        nrows: n,
        ncols: m,
        entries,
    })
}

/// Converged (or best-effort) Sinkhorn potentials for one problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub lambda: f64,
    /// Total-variation violation of the worse marginal of the induced coupling.
    pub marginal_error: f64,
    pub iterations: usize,
}

/// A potential `φ` for a symmetric self-transport problem; the pair `(φ, φ)`
/// is the dual solution.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricPotential {
    pub phi: Vec<f64>,
    pub lambda: f64,
    pub marginal_error: f64,
    pub iterations: usize,
}

impl SymmetricPotential {
    pub fn to_dual(&self) -> DualPotentials {
        DualPotentials {
            phi: self.phi.clone(),
            psi: self.phi.clone(),
            lambda: self.lambda,
            marginal_error: self.marginal_error,
            iterations: self.iterations,
        }
    }
}

/// Joint probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    nrows: usize,
    ncols: usize,
    entries: Vec<f64>,
}

impl Coupling {
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.ncols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.ncols];
        for i in 0..self.nrows {
            for (acc, p) in s.iter_mut().zip(self.row(i)) {
                *acc += p;
            }
        }
        s
    }

    pub fn total(&self) -> f64 {
        self.row_sums().iter().sum()
    }

    /// Total-variation violation of the worse marginal.
    pub fn marginal_error(&self, a: &[f64], b: &[f64]) -> f64 {
        let tv = |s: Vec<f64>, w: &[f64]| {
            0.5 * s.iter().zip(w).map(|(x, y)| (x - y).abs()).sum::<f64>()
        };
        tv(self.row_sums(), a).max(tv(self.col_sums(), b))
    }

    /// Projects onto the exact transport polytope: rows and columns that
    /// carry too much mass are scaled down, and the deficit is filled by a
    /// rank-one correction. Entries stay nonnegative.
    pub fn rounded(&self, a: &[f64], b: &[f64]) -> Coupling {
        let mut p = self.entries.clone();
        let (n, m) = (self.nrows, self.ncols);
        for i in 0..n {
            let r: f64 = p[i * m..(i + 1) * m].iter().sum();
            if r > a[i] && r > 0.0 {
                let s = a[i] / r;
                p[i * m..(i + 1) * m].iter_mut().for_each(|v| *v *= s);
            }
        }
        let mut cols = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                cols[j] += p[i * m + j];
            }
        }
        for j in 0..m {
            if cols[j] > b[j] && cols[j] > 0.0 {
                let s = b[j] / cols[j];
                for i in 0..n {
                    p[i * m + j] *= s;
                }
            }
        }
        let row_def: Vec<f64> = (0..n)
            .map(|i| (a[i] - p[i * m..(i + 1) * m].iter().sum::<f64>()).max(0.0))
            .collect();
        let mut col_def = vec![0.0; m];
        for j in 0..m {
            let c: f64 = (0..n).map(|i| p[i * m + j]).sum();
            col_def[j] = (b[j] - c).max(0.0);
        }
        let mass: f64 = row_def.iter().sum();
        if mass > 0.0 {
            for i in 0..n {
                for j in 0..m {
                    p[i * m + j] += row_def[i] * col_def[j] / mass;
                }
            }
        }
        Coupling {
            nrows: n,
            ncols: m,
            entries: p,
        }
    }

    /// `Σ π_ij C_ij + λ Σ π_ij ln(π_ij / (a_i b_j))`; zero entries contribute 0.
    pub fn primal_value(&self, cost: &CostMatrix, a: &[f64], b: &[f64], lambda: f64) -> f64 {
        let mut transport = 0.0;
        let mut info = 0.0;
        for i in 0..self.nrows {
            for j in 0..self.ncols {
                let p = self.get(i, j);
                if p > 0.0 {
                    transport += p * cost.get(i, j);
                    info += p * (p / (a[i] * b[j])).ln();
                }
            }
        }
        transport + lambda * info
    }
}

fn check_shapes(cost: &CostMatrix, a: &[f64], b: &[f64]) -> Result<()> {
    if cost.nrows() != a.len() || cost.ncols() != b.len() {
        return Err(invalid(format!(
            "cost is {}x{} but weights have lengths {} and {}",
            cost.nrows(),
            cost.ncols(),
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `π_ij = a_i b_j exp((φ_i + ψ_j − C_ij) / λ)`, evaluated in log space.
pub fn coupling_from_potentials(
    pot: &DualPotentials,
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
) -> Result<Coupling> {
    check_shapes(cost, a, b)?;
    if pot.phi.len() != a.len() || pot.psi.len() != b.len() {
        return Err(invalid("potentials do not match the cost matrix shape"));
    }
    let (n, m) = (a.len(), b.len());
    let inv = 1.0 / pot.lambda;
    let log_b: Vec<f64> = b.iter().map(|w| w.ln()).collect();
    let mut entries = vec![0.0; n * m];
    for i in 0..n {
        let la = a[i].ln();
        let row = cost.row(i);
        for j in 0..m {
            entries[i * m + j] = (la + log_b[j] + (pot.phi[i] + pot.psi[j] - row[j]) * inv).exp();
        }
    }
    Ok(Coupling {
        nrows: n,
        ncols: m,
        entries,
    })
}

/// Dual objective `Σ a φ + Σ b ψ + λ − λ Σ a_i b_j exp((φ_i + ψ_j − C_ij)/λ)`.
pub fn dual_value(pot: &DualPotentials, cost: &CostMatrix, a: &[f64], b: &[f64]) -> Result<f64> {
    let pi = coupling_from_potentials(pot, cost, a, b)?;
    let lin: f64 = a.iter().zip(&pot.phi).map(|(w, f)| w * f).sum::<f64>()
        + b.iter().zip(&pot.psi).map(|(w, g)| w * g).sum::<f64>();
    Ok(lin + pot.lambda * (1.0 - pi.total()))
}

/// Solution of one entropic transport problem.
#[derive(Debug, Clone)]
pub struct Transport {
    pub cost: CostMatrix,
    pub potentials: DualPotentials,
    pub coupling: Coupling,
    /// Primal objective at the rounded coupling.
    pub value: f64,
}

pub fn entropic_transport(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    params: &SinkhornParams,
    warm: Option<&DualPotentials>,
) -> Result<Transport> {
    let cost = cost_matrix(src, tgt)?;
    let a = src.weights().as_slice();
    let b = tgt.weights().as_slice();
    let potentials = sinkhorn_potentials_warm(&cost, a, b, params, warm)?;
    let coupling = coupling_from_potentials(&potentials, &cost, a, b)?;
    let value = coupling.rounded(a, b).primal_value(&cost, a, b, params.lambda);
    Ok(Transport {
        cost,
        potentials,
        coupling,
        value,
    })
}

/// Solution of a self-transport problem `W²_λ(P, P)`.
#[derive(Debug, Clone)]
pub struct SelfTransport {
    pub cost: CostMatrix,
    pub potential: SymmetricPotential,
    pub coupling: Coupling,
    pub value: f64,
}

pub fn self_transport(
    measure: &DiscreteMeasure,
    params: &SinkhornParams,
    warm: Option<&SymmetricPotential>,
) -> Result<SelfTransport> {
    let cost = cost_matrix(measure, measure)?;
    let a = measure.weights().as_slice();
    let potential = symmetric_potential_warm(&cost, a, params, warm)?;
    let coupling = coupling_from_potentials(&potential.to_dual(), &cost, a, a)?;
    let value = coupling.rounded(a, a).primal_value(&cost, a, a, params.lambda);
    Ok(SelfTransport {
        cost,
        potential,
        coupling,
        value,
    })
}

pub fn entropic_w2_discrete(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    params: &SinkhornParams,
) -> Result<f64> {
    Ok(entropic_transport(src, tgt, params, None)?.value)
}

/// `W²_λ(P, Q) − (W²_λ(P, P) + W²_λ(Q, Q)) / 2` with symmetric self terms.
pub fn sinkhorn_divergence_discrete(
    src: &DiscreteMeasure,
    tgt: &DiscreteMeasure,
    params: &SinkhornParams,
) -> Result<f64> {
    let cross = entropic_transport(src, tgt, params, None)?.value;
    let ss = self_transport(src, params, None)?.value;
    let tt = self_transport(tgt, params, None)?.value;
    Ok(cross - 0.5 * (ss + tt))
}
