//! Log-domain Sinkhorn iterations.
//!
//! Every update is a row-wise soft-min
//! `h_i = −λ ln Σ_j w_j exp((p_j − C_ij) / λ)`, evaluated with a streaming
//! log-sum-exp so that no intermediate kernel value is ever formed. Rows are
//! independent and each row is reduced in index order, so results are
//! bit-identical for any number of worker threads.
//!
//! Cold starts anneal the regularization from the cost diameter down to the
//! requested `λ`, halving at each stage; the final stage iterates at `λ`
//! until the marginal violation drops below `tol`. When the observed
//! contraction of plain sweeps predicts more remaining sweeps than a dense
//! Newton solve costs, a Newton move on the dual is tried instead and kept
//! only if it lowers the marginal violation. Every accepted step, of either
//! kind, counts as one iteration.

use rayon::prelude::*;

use super::kernel::Kernel;
use super::newton;
use super::{check_shapes, CostMatrix, DualPotentials, SinkhornParams, SymmetricPotential};
use crate::error::{invalid, Error, Result};
use crate::measure::check_weights;

const ANNEAL_FACTOR: f64 = 0.5;
/// Step lengths tried along a Newton direction, longest first, as fractions
/// of the largest step that moves no potential by more than
/// `NEWTON_RADIUS · λ`.
const NEWTON_STEPS: [f64; 4] = [1.0, 0.5, 0.25, 0.125];
const NEWTON_RADIUS: f64 = 4.0;
/// Plain sweeps to run after a rejected Newton move before trying again.
const NEWTON_COOLDOWN: usize = 8;
/// A Newton solve on `n` atoms is priced at `n / NEWTON_ATOMS_PER_SWEEP`
/// plain sweeps, and never below `NEWTON_MIN_SWEEPS`.
const NEWTON_ATOMS_PER_SWEEP: f64 = 4.0;
const NEWTON_MIN_SWEEPS: f64 = 4.0;
/// Below this many cost entries the row loop stays on the calling thread.
pub(super) const PARALLEL_MIN_ENTRIES: usize = 1 << 14;

#[inline]
fn streaming_lse(terms: impl Iterator<Item = f64>) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for x in terms {
        if x == f64::NEG_INFINITY {
            continue;
        }
        if x <= max {
            sum += (x - max).exp();
        } else {
            sum = sum * (max - x).exp() + 1.0;
            max = x;
        }
    }
    if sum == 0.0 {
        f64::NEG_INFINITY
    } else {
        max + sum.ln()
    }
}

/// `out_i = −λ ln Σ_j exp(log_w_j + (pot_j − C_ij)/λ)`.
fn softmin_rows(cost: &CostMatrix, log_w: &[f64], pot: &[f64], lambda: f64, out: &mut [f64]) {
    let inv = 1.0 / lambda;
    let shifted: Vec<f64> = log_w.iter().zip(pot).map(|(lw, p)| lw + p * inv).collect();
    let row_min = |(i, o): (usize, &mut f64)| {
        let row = cost.row(i);
        let lse = streaming_lse(row.iter().zip(&shifted).map(|(c, s)| s - c * inv));
        *o = -lambda * lse;
    };
    if cost.as_slice().len() >= PARALLEL_MIN_ENTRIES {
        out.par_iter_mut().enumerate().for_each(row_min);
    } else {
        out.iter_mut().enumerate().for_each(row_min);
    }
}

/// Soft-min updates at the target `λ`, routed through a cached [`Kernel`]
/// and falling back to the log-domain reduction when the kernel underflows.
struct Updates<'a> {
    cost: &'a CostMatrix,
    cost_t: Option<&'a CostMatrix>,
    a: &'a [f64],
    b: &'a [f64],
    log_a: &'a [f64],
    log_b: &'a [f64],
    lambda: f64,
    kernel: Option<Kernel>,
}

impl<'a> Updates<'a> {
    /// Kernel around `(phi, psi)` unless the cached one still covers them.
    fn refresh(&mut self, phi: &[f64], psi: &[f64]) -> Option<&Kernel> {
        let stale = !matches!(&self.kernel, Some(k) if k.covers(phi, psi));
        if stale {
            if !phi.iter().chain(psi).all(|v| v.is_finite()) {
                return None;
            }
            self.kernel = Some(Kernel::new(self.cost, phi, psi, self.lambda, self.cost_t.is_none()));
        }
        self.kernel.as_ref()
    }

    /// `out = T_b psi`; `phi` is the current row potential.
    fn rows(&mut self, phi: &[f64], psi: &[f64], out: &mut [f64]) {
        let b = self.b;
        if self.refresh(phi, psi).is_some_and(|k| k.softmin_rows(b, psi, out)) {
            return;
        }
        self.kernel = None;
        softmin_rows(self.cost, self.log_b, psi, self.lambda, out);
    }

    /// `out = T_a phi`; `psi` is the current column potential.
    fn cols(&mut self, phi: &[f64], psi: &[f64], out: &mut [f64]) {
        let a = self.a;
        if self.refresh(phi, psi).is_some_and(|k| k.softmin_cols(a, phi, out)) {
            return;
        }
        self.kernel = None;
        softmin_rows(self.cost_t.unwrap_or(self.cost), self.log_a, phi, self.lambda, out);
    }
}

/// Total-variation gap between `a` and the row marginal of the coupling
/// induced by `(phi, ·)`, given `next = softmin` of that row.
fn row_violation(a: &[f64], phi: &[f64], next: &[f64], lambda: f64) -> f64 {
    let mut tv = 0.0;
    for i in 0..a.len() {
        if a[i] > 0.0 {
            tv += a[i] * (((phi[i] - next[i]) / lambda).exp() - 1.0).abs();
        }
    }
    0.5 * tv
}

fn log_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|x| x.ln()).collect()
}

pub fn sinkhorn_potentials(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    params: &SinkhornParams,
) -> Result<DualPotentials> {
    sinkhorn_potentials_warm(cost, a, b, params, None)
}

/// [`sinkhorn_potentials`] started from `warm` instead of an annealed cold
/// start. The converged result agrees with the cold one up to `tol`.
pub fn sinkhorn_potentials_warm(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    params: &SinkhornParams,
    warm: Option<&DualPotentials>,
) -> Result<DualPotentials> {
    params.validate()?;
    check_shapes(cost, a, b)?;
    check_weights(a)?;
    check_weights(b)?;
    let lambda = params.lambda;
    let (n, m) = (a.len(), b.len());
    let cost_t = cost.transpose();
    let log_a = log_weights(a);
    let log_b = log_weights(b);

    let mut phi = vec![0.0; n];
    let mut psi = vec![0.0; m];
    let mut next = vec![0.0; n];
    let mut iterations = 0;

    match warm {
        Some(w) if w.phi.len() == n && w.psi.len() == m => {
            phi.copy_from_slice(&w.phi);
            psi.copy_from_slice(&w.psi);
        }
        Some(_) => return Err(invalid("warm-start potentials have the wrong shape")),
        None => {
            let mut eps = cost.max().max(lambda);
            while eps > lambda && iterations < params.max_iter {
                softmin_rows(cost, &log_b, &psi, eps, &mut phi);
                softmin_rows(&cost_t, &log_a, &phi, eps, &mut psi);
                iterations += 1;
                eps *= ANNEAL_FACTOR;
            }
        }
    }

    let mut updates = Updates {
        cost,
        cost_t: Some(&cost_t),
        a,
        b,
        log_a: &log_a,
        log_b: &log_b,
        lambda,
        kernel: None,
    };
    let mut next_psi = vec![0.0; m];
    // Columns of the induced coupling are exact right after a ψ-update at λ.
    let mut columns_exact = false;
    let mut cooldown = 0;
    let mut current = f64::INFINITY;
    let mut previous = f64::INFINITY;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    loop {
        updates.rows(&phi, &psi, &mut next);
        if columns_exact {
            let err = row_violation(a, &phi, &next, lambda);
            if !err.is_finite() {
                break;
            }
            previous = current;
            current = err;
            if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
                best = Some((err, phi.clone(), psi.clone()));
            }
            if err <= params.tol {
                return Ok(finish(phi, psi, lambda, err, iterations, b));
            }
        }
        if iterations >= params.max_iter {
            break;
        }
        iterations += 1;
        if columns_exact && cooldown == 0 && newton_pays(previous, current, params.tol, n) {
            if let Some((p, q)) = newton_move(&mut updates, &phi, &psi, current) {
                phi = p;
                psi = q;
                current = f64::INFINITY;
                continue;
            }
            cooldown = NEWTON_COOLDOWN;
        }
        cooldown = cooldown.saturating_sub(1);
        std::mem::swap(&mut phi, &mut next);
        updates.cols(&phi, &psi, &mut next_psi);
        std::mem::swap(&mut psi, &mut next_psi);
        columns_exact = true;
    }

    let (err, phi, psi) = best.unwrap_or((f64::INFINITY, phi, psi));
    Err(Error::NonConvergence {
        potentials: Box::new(finish(phi, psi, lambda, err, iterations, b)),
        marginal_error: err,
        iterations,
    })
}

/// Shifts so that the `b`-weighted mean of ψ is zero.
fn finish(
    mut phi: Vec<f64>,
    mut psi: Vec<f64>,
    lambda: f64,
    marginal_error: f64,
    iterations: usize,
    b: &[f64],
) -> DualPotentials {
    let shift: f64 = b.iter().zip(&psi).map(|(w, g)| w * g).sum();
    if shift.is_finite() {
        psi.iter_mut().for_each(|g| *g -= shift);
        phi.iter_mut().for_each(|f| *f += shift);
    }
    DualPotentials {
        phi,
        psi,
        lambda,
        marginal_error,
        iterations,
    }
}

/// Whether the sweeps still needed to reach `tol`, extrapolated from the
/// last contraction `current / previous`, cost more than a Newton solve.
fn newton_pays(previous: f64, current: f64, tol: f64, atoms: usize) -> bool {
    if !previous.is_finite() {
        return false;
    }
    let rate = current / previous;
    if rate >= 1.0 {
        return true;
    }
    let remaining = (tol / current).ln() / rate.ln();
    remaining > (atoms as f64 / NEWTON_ATOMS_PER_SWEEP).max(NEWTON_MIN_SWEEPS)
}

fn step_scale(dir: &[f64], lambda: f64) -> f64 {
    let largest = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if largest > NEWTON_RADIUS * lambda {
        NEWTON_RADIUS * lambda / largest
    } else {
        1.0
    }
}

/// Newton move in φ followed by the exact ψ-update, accepted at the first
/// step length whose marginal violation beats `err`.
fn newton_move(updates: &mut Updates, phi: &[f64], psi: &[f64], err: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let lambda = updates.lambda;
    let dir = newton::semi_dual_direction(updates.cost, updates.a, updates.b, phi, psi, lambda)?;
    let mut rows = vec![0.0; phi.len()];
    let scale = step_scale(&dir, lambda);
    for t in NEWTON_STEPS.map(|t| t * scale) {
        let cand: Vec<f64> = phi.iter().zip(&dir).map(|(p, d)| p + t * d).collect();
        let mut cand_psi = vec![0.0; psi.len()];
        updates.cols(&cand, psi, &mut cand_psi);
        updates.rows(&cand, &cand_psi, &mut rows);
        if row_violation(updates.a, &cand, &rows, lambda) < err {
            return Some((cand, cand_psi));
        }
    }
    None
}

/// Symmetric counterpart of [`newton_move`].
fn symmetric_newton_move(updates: &mut Updates, phi: &[f64], err: f64) -> Option<Vec<f64>> {
    let lambda = updates.lambda;
    let dir = newton::symmetric_direction(updates.cost, updates.a, phi, lambda)?;
    let mut rows = vec![0.0; phi.len()];
    let scale = step_scale(&dir, lambda);
    for t in NEWTON_STEPS.map(|t| t * scale) {
        let cand: Vec<f64> = phi.iter().zip(&dir).map(|(p, d)| p + t * d).collect();
        updates.rows(&cand, &cand, &mut rows);
        if row_violation(updates.a, &cand, &rows, lambda) < err {
            return Some(cand);
        }
    }
    None
}

pub fn symmetric_potential(
    cost: &CostMatrix,
    a: &[f64],
    params: &SinkhornParams,
) -> Result<SymmetricPotential> {
    symmetric_potential_warm(cost, a, params, None)
}

/// Self-transport potential via the averaged update `φ ← (φ + T(φ)) / 2`,
/// where `T` is the soft-min against `a` itself.
pub fn symmetric_potential_warm(
    cost: &CostMatrix,
    a: &[f64],
    params: &SinkhornParams,
    warm: Option<&SymmetricPotential>,
) -> Result<SymmetricPotential> {
    params.validate()?;
    check_shapes(cost, a, a)?;
    check_weights(a)?;
    if !cost.is_symmetric() {
        return Err(invalid("symmetric_potential needs a symmetric cost matrix"));
    }
    let lambda = params.lambda;
    let n = a.len();
    let log_a = log_weights(a);
    let mut phi = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut iterations = 0;

    match warm {
        Some(w) if w.phi.len() == n => phi.copy_from_slice(&w.phi),
        Some(_) => return Err(invalid("warm-start potential has the wrong length")),
        None => {
            let mut eps = cost.max().max(lambda);
            while eps > lambda && iterations < params.max_iter {
                softmin_rows(cost, &log_a, &phi, eps, &mut next);
                for (p, q) in phi.iter_mut().zip(&next) {
                    *p = 0.5 * (*p + q);
                }
                iterations += 1;
                eps *= ANNEAL_FACTOR;
            }
        }
    }

    let mut updates = Updates {
        cost,
        cost_t: None,
        a,
        b: a,
        log_a: &log_a,
        log_b: &log_a,
        lambda,
        kernel: None,
    };
    let mut cooldown = 0;
    let mut previous = f64::INFINITY;
    let mut best: Option<(f64, Vec<f64>)> = None;
    loop {
        updates.rows(&phi, &phi, &mut next);
        let err = row_violation(a, &phi, &next, lambda);
        if !err.is_finite() {
            break;
        }
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, phi.clone()));
        }
        if err <= params.tol {
            return Ok(SymmetricPotential {
                phi,
                lambda,
                marginal_error: err,
                iterations,
            });
        }
        if iterations >= params.max_iter {
            break;
        }
        iterations += 1;
        if cooldown == 0 && newton_pays(previous, err, params.tol, n) {
            if let Some(p) = symmetric_newton_move(&mut updates, &phi, err) {
                phi = p;
                previous = f64::INFINITY;
                continue;
            }
            cooldown = NEWTON_COOLDOWN;
        }
        previous = err;
        cooldown = cooldown.saturating_sub(1);
        for (p, q) in phi.iter_mut().zip(&next) {
            *p = 0.5 * (*p + q);
        }
    }

    let (err, phi) = best.unwrap_or((f64::INFINITY, phi));
    let potential = SymmetricPotential {
        phi,
        lambda,
        marginal_error: err,
        iterations,
    };
    Err(Error::NonConvergence {
        potentials: Box::new(potential.to_dual()),
        marginal_error: err,
        iterations,
    })
}

/// One plain Sinkhorn sweep `(φ, ψ) ↦ (T_b ψ, T_a T_b ψ)`, exposed for
/// fixed-point checks.
pub fn sinkhorn_step(
    pot: &DualPotentials,
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
) -> Result<DualPotentials> {
    check_shapes(cost, a, b)?;
    let mut phi = vec![0.0; a.len()];
    let mut psi = vec![0.0; b.len()];
    softmin_rows(cost, &log_weights(b), &pot.psi, pot.lambda, &mut phi);
    softmin_rows(&cost.transpose(), &log_weights(a), &phi, pot.lambda, &mut psi);
    Ok(DualPotentials {
        phi,
        psi,
        lambda: pot.lambda,
        marginal_error: pot.marginal_error,
        iterations: pot.iterations + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_naive() {
        let xs = [0.3, -1.2, 4.0, 2.5, -7.0];
        let naive = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((streaming_lse(xs.iter().copied()) - naive).abs() < 1e-14);
    }

    #[test]
    fn lse_handles_extreme_and_empty_terms() {
        let v = streaming_lse([-1e6, -1e6 + 1.0].into_iter());
        assert!((v - (-1e6 + 1.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
        assert_eq!(streaming_lse([f64::NEG_INFINITY].into_iter()), f64::NEG_INFINITY);
        assert_eq!(streaming_lse([f64::NEG_INFINITY, 2.0].into_iter()), 2.0);
    }
}
