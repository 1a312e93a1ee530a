//! Independent check on the Sinkhorn solver for tiny supports: minimize the
//! entropic primal directly over the transport polytope.
//!
//! Feasible couplings are `π = a bᵀ + N z`, where the columns of `N` span the
//! matrices with zero row and column sums. The strictly convex objective is
//! minimized over `z` by damped Newton steps projected onto that subspace,
//! from the independent coupling and from random interior starts.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::cost_matrix;
use crate::error::{invalid, Error, Result};
use crate::measure::DiscreteMeasure;
use crate::rng;

pub const MAX_BRUTE_FORCE_CELLS: usize = 9;
const RESTARTS: usize = 20;
const AGREEMENT: f64 = 1e-6;
const ORACLE_SEED: u64 = 0x0b5e_55ed;

struct Problem {
    cost: Vec<f64>,
    indep: Vec<f64>,
    basis: DMatrix<f64>,
    lambda: f64,
}

impl Problem {
    fn objective(&self, pi: &[f64]) -> f64 {
        pi.iter()
            .zip(&self.cost)
            .zip(&self.indep)
            .map(|((&p, &c), &q)| if p > 0.0 { p * c + self.lambda * p * (p / q).ln() } else { 0.0 })
            .sum()
    }

    fn coupling(&self, z: &DVector<f64>) -> Vec<f64> {
        let step = &self.basis * z;
        self.indep.iter().zip(step.iter()).map(|(q, s)| q + s).collect()
    }

    fn minimize(&self, mut z: DVector<f64>) -> f64 {
        let k = self.basis.ncols();
        for _ in 0..500 {
            let pi = self.coupling(&z);
            let dfdpi: Vec<f64> = pi
                .iter()
                .zip(&self.cost)
                .zip(&self.indep)
                .map(|((&p, &c), &q)| c + self.lambda * ((p / q).ln() + 1.0))
                .collect();
            let grad = self.basis.transpose() * DVector::from_vec(dfdpi);
            let mut hess = DMatrix::zeros(k, k);
            for (row, &p) in pi.iter().enumerate() {
                let w = self.lambda / p;
                for a in 0..k {
                    let na = self.basis[(row, a)];
                    if na == 0.0 {
                        continue;
                    }
                    for b in 0..k {
                        hess[(a, b)] += w * na * self.basis[(row, b)];
                    }
                }
            }
            let Some(chol) = hess.cholesky() else { break };
            let dir = -chol.solve(&grad);
            let decrement = -grad.dot(&dir);
            if decrement < 1e-24 {
                break;
            }
            let f0 = self.objective(&pi);
            let mut t = 1.0;
            loop {
                let cand = &z + &dir * t;
                let cpi = self.coupling(&cand);
                if cpi.iter().all(|&p| p > 0.0) && self.objective(&cpi) <= f0 - 0.25 * t * decrement {
                    z = cand;
                    break;
                }
                t *= 0.5;
                if t < 1e-20 {
                    return f0;
                }
            }
        }
        self.objective(&self.coupling(&z))
    }
}

/// Entropic value by direct minimization over couplings; supports with
/// `n·m ≤ 9` only. Fails if the restarts disagree by more than `1e-6`.
pub fn brute_force_entropic(src: &DiscreteMeasure, tgt: &DiscreteMeasure, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(invalid("lambda must be positive"));
    }
    if src.len() * tgt.len() > MAX_BRUTE_FORCE_CELLS {
        return Err(Error::Unsupported(format!(
            "brute force handles n·m ≤ {MAX_BRUTE_FORCE_CELLS}, got {}",
            src.len() * tgt.len()
        )));
    }
    let c = cost_matrix(src, tgt)?;
    let rows: Vec<usize> = (0..src.len()).filter(|&i| src.weights()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..tgt.len()).filter(|&j| tgt.weights()[j] > 0.0).collect();
    let (n, m) = (rows.len(), cols.len());
    let mut cost = Vec::with_capacity(n * m);
    let mut indep = Vec::with_capacity(n * m);
    for &i in &rows {
        for &j in &cols {
            cost.push(c.get(i, j));
            indep.push(src.weights()[i] * tgt.weights()[j]);
        }
    }
    if n == 1 || m == 1 {
        return Ok(cost.iter().zip(&indep).map(|(c, q)| c * q).sum());
    }

    let k = (n - 1) * (m - 1);
    let mut basis = DMatrix::zeros(n * m, k);
    for i in 0..n - 1 {
        for j in 0..m - 1 {
            let col = i * (m - 1) + j;
            basis[(i * m + j, col)] = 1.0;
            basis[(i * m + m - 1, col)] = -1.0;
            basis[((n - 1) * m + j, col)] = -1.0;
            basis[((n - 1) * m + m - 1, col)] = 1.0;
        }
    }
    let problem = Problem {
        cost,
        indep,
        basis,
        lambda,
    };

    let mut rng = rng::stream(ORACLE_SEED, 0);
    let mut values = Vec::with_capacity(RESTARTS);
    values.push(problem.minimize(DVector::zeros(k)));
    for _ in 1..RESTARTS {
        let u = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let dir = &problem.basis * &u;
        let reach = problem
            .indep
            .iter()
            .zip(dir.iter())
            .filter(|(_, &d)| d < 0.0)
            .map(|(q, d)| -q / d)
            .fold(f64::INFINITY, f64::min);
        let frac = 0.5 + 0.45 * rng.random::<f64>();
        let z0 = if reach.is_finite() { u * (frac * reach) } else { u };
        values.push(problem.minimize(z0));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > AGREEMENT {
        return Err(Error::OracleFailure { spread: hi - lo });
    }
    Ok(values[0])
}
