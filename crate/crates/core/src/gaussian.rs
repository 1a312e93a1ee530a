//! Closed forms for the linear-generator / Gaussian-target setting.
//!
//! For a target `N(0, K_Y)` with eigenvalues `λ_1 ≥ … ≥ λ_d` and a rank-`r`
//! linear generator, the entropic objective is minimized by the
//! soft-thresholded `r`-PCA covariance (eigenvalues `(λ_i − λ/2)_+` on the
//! top-`r` eigenvectors), and the Sinkhorn-divergence objective by the plain
//! `r`-PCA covariance.

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::linalg::{psd_eig, sym_eig, SymMatrix};
use crate::measure::GaussianMeasure;

/// Covariances handed to the closed form must have every eigenvalue above this.
pub const PD_THRESHOLD: f64 = 1e-10;

fn require_pd(k: &SymMatrix) -> Result<()> {
    let min = sym_eig(k)?.min_eigenvalue();
    if min <= PD_THRESHOLD {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: min,
        });
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("lambda must be positive, got {lambda}")))
    }
}

/// Entropic squared 2-Wasserstein distance between two Gaussians:
///
/// ```text
/// ‖μ_a − μ_b‖² + Tr K_a + Tr K_b − Tr D + (λ/2)(d(1 − ln λ) + ln det(D + (λ/2) I))
/// D = (4 K_a^{1/2} K_b K_a^{1/2} + (λ²/4) I)^{1/2}
/// ```
///
/// Both traces and the log-determinant come from the eigenvalues of `D²`.
pub fn gaussian_entropic_w2(a: &GaussianMeasure, b: &GaussianMeasure, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if a.dim() != b.dim() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    require_pd(a.cov())?;
    require_pd(b.cov())?;
    let d = a.dim();
    let root_a = psd_eig(a.cov())?.map_eigenvalues(|_, v| v.sqrt())?;
    let inner = root_a.as_matrix() * b.cov().as_matrix() * root_a.as_matrix() * 4.0
        + DMatrix::identity(d, d) * (lambda * lambda / 4.0);
    let spectrum = psd_eig(&SymMatrix::new(inner)?)?.eigenvalues;
    let mut trace_d = 0.0;
    let mut log_det = 0.0;
    for &mu in spectrum.iter() {
        let s = mu.sqrt();
        trace_d += s;
        log_det += (s + lambda / 2.0).ln();
    }
    let mean_gap = (a.mean() - b.mean()).norm_squared();
    Ok(mean_gap + a.cov().trace() + b.cov().trace() - trace_d
        + 0.5 * lambda * (d as f64 * (1.0 - lambda.ln()) + log_det))
}

fn check_rank(k: &SymMatrix, r: usize) -> Result<()> {
    if r == 0 || r > k.dim() {
        return Err(invalid(format!("r = {r} outside 1..={}", k.dim())));
    }
    Ok(())
}

/// Top-`r` eigenvectors of `K_Y` with eigenvalues `(λ_i − λ/2)_+`.
pub fn soft_threshold_pca(k_y: &SymMatrix, r: usize, lambda: f64) -> Result<SymMatrix> {
    check_rank(k_y, r)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    psd_eig(k_y)?.map_eigenvalues(|i, v| if i < r { (v - lambda / 2.0).max(0.0) } else { 0.0 })
}

/// Projection of `K_Y` onto its top-`r` eigenspace.
pub fn r_pca(k_y: &SymMatrix, r: usize) -> Result<SymMatrix> {
    check_rank(k_y, r)?;
    psd_eig(k_y)?.map_eigenvalues(|i, v| if i < r { v } else { 0.0 })
}

/// Minimum of the entropic objective over rank-`r` linear generators:
/// `Σ_{i≤r} [m_i + (λ/2) ln(λ_i / m_i)] + Σ_{i>r} λ_i` with
/// `m_i = min(λ/2, λ_i)`. A zero eigenvalue contributes zero.
pub fn entropic_population_value(k_y: &SymMatrix, r: usize, lambda: f64) -> Result<f64> {
    check_rank(k_y, r)?;
    check_lambda(lambda)?;
    let eig = psd_eig(k_y)?;
    let mut value = 0.0;
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if i < r {
            let distortion = ev.min(lambda / 2.0);
            if distortion > 0.0 {
                value += distortion + 0.5 * lambda * (ev / distortion).ln();
            }
        } else {
            value += ev;
        }
    }
    Ok(value)
}

/// `W²_λ(P_{Y_S}, P_{Y_S}) / 2 + E‖Y_{S⊥}‖²` for the subspace `S` spanned by
/// the orthonormal columns of `basis` (d×r). The self-distance is evaluated
/// in `S`'s own coordinates, so values are comparable across subspaces of
/// equal dimension.
pub fn sinkhorn_subspace_objective(k_y: &SymMatrix, basis: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let d = k_y.dim();
    let r = basis.ncols();
    if basis.nrows() != d || r == 0 || r > d {
        return Err(invalid(format!(
            "basis is {}x{}, expected {d}xr with 1 ≤ r ≤ {d}",
            basis.nrows(),
            r
        )));
    }
    let gram = basis.transpose() * basis;
    if (gram - DMatrix::<f64>::identity(r, r)).abs().max() > 1e-8 {
        return Err(invalid("subspace basis is not orthonormal"));
    }
    let projected = SymMatrix::new(basis.transpose() * k_y.as_matrix() * basis)?;
    let g = GaussianMeasure::centered(projected.clone())?;
    let self_distance = gaussian_entropic_w2(&g, &g, lambda)?;
    Ok(0.5 * self_distance + (k_y.trace() - projected.trace()))
}
