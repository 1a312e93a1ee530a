//! Newton directions for the entropic dual.
//!
//! With columns made exact by a ψ-update, the dual reduces to a concave
//! function of φ alone whose Hessian is `−(1/λ)(diag(r) − π D_b⁻¹ πᵀ)`, with
//! `r` the row sums of the current coupling. For the self-transport problem
//! the Hessian of `φ ↦ 2⟨a, φ⟩ − λ Σ π(φ, φ)` is `−(2/λ)(diag(r) + π)`.
//! Both systems are small and dense here, so they are factored directly.

use nalgebra::{DMatrix, DVector};

use super::CostMatrix;

/// Newton steps are skipped above this many atoms.
pub(super) const MAX_ATOMS: usize = 512;

fn coupling(cost: &CostMatrix, a: &[f64], b: &[f64], phi: &[f64], psi: &[f64], lambda: f64) -> DMatrix<f64> {
    let inv = 1.0 / lambda;
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        a[i] * b[j] * ((phi[i] + psi[j] - cost.get(i, j)) * inv).exp()
    })
}

fn usable(w: &[f64]) -> bool {
    w.len() <= MAX_ATOMS && w.iter().all(|&x| x > 0.0)
}

/// Ascent direction in φ for the semi-dual, assuming `psi` is the exact
/// soft-min of `phi` against `a`.
///
/// The negated Hessian is the Laplacian of the graph on source atoms with
/// edge weights `W_ik = Σ_j π_ij π_kj / b_j`. Forming its diagonal as
/// `r_i − Σ_j π_ij² / b_j` cancels catastrophically once the coupling is
/// nearly a permutation, so the system is solved by elimination that keeps
/// every pivot as a sum of nonnegative terms. At small `λ` the graph is
/// close to disconnected; a Levenberg shift `SHIFT · a_i` on the diagonal
/// keeps those nearly flat directions from amplifying rounding noise.
pub(super) fn semi_dual_direction(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    phi: &[f64],
    psi: &[f64],
    lambda: f64,
) -> Option<Vec<f64>> {
    if !usable(a) || !usable(b) {
        return None;
    }
    let n = a.len();
    let pi = coupling(cost, a, b, phi, psi, lambda);
    let mut scaled = pi.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col /= b[j];
    }
    let weights = &scaled * pi.transpose();
    let rhs = (0..n).map(|i| lambda * (a[i] - pi.row(i).sum())).collect();
    let excess = a.iter().map(|w| SHIFT * w).collect();
    // Column-major storage of the product read as row-major is its
    // transpose, which only swaps the roles of W_ik and W_ki.
    solve_shifted_laplacian(weights.as_slice().to_vec(), excess, n, rhs)
}

const SHIFT: f64 = 1e-9;

/// Solves `(L + diag(excess)) x = rhs`, where `L` is the Laplacian of the
/// nonnegative weights `w` (row-major `n × n`). Diagonal entries of `w` are
/// never read, so elimination is free to overwrite them.
fn solve_shifted_laplacian(mut w: Vec<f64>, mut excess: Vec<f64>, n: usize, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let mut pivots = vec![0.0; n];
    for k in 0..n {
        let (done, rest) = w.split_at_mut((k + 1) * n);
        let pivot_row = &done[k * n + k + 1..];
        let p = pivot_row.iter().sum::<f64>() + excess[k];
        if !(p > 0.0 && p.is_finite()) {
            return None;
        }
        pivots[k] = p;
        for (off, row) in rest.chunks_exact_mut(n).enumerate() {
            let i = k + 1 + off;
            let f = row[k] / p;
            if f == 0.0 {
                continue;
            }
            rhs[i] += f * rhs[k];
            excess[i] += f * excess[k];
            for (x, y) in row[k + 1..].iter_mut().zip(pivot_row) {
                *x += f * y;
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = w[k * n + k + 1..(k + 1) * n].iter().zip(&x[k + 1..]).map(|(a, b)| a * b).sum();
        x[k] = (rhs[k] + s) / pivots[k];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Ascent direction for the symmetric self-transport dual.
pub(super) fn symmetric_direction(cost: &CostMatrix, a: &[f64], phi: &[f64], lambda: f64) -> Option<Vec<f64>> {
    if !usable(a) {
        return None;
    }
    let n = a.len();
    let mut hess = coupling(cost, a, a, phi, phi, lambda);
    let r: Vec<f64> = (0..n).map(|i| hess.row(i).sum()).collect();
    for i in 0..n {
        hess[(i, i)] += r[i];
    }
    let rhs = DVector::from_fn(n, |i, _| lambda * (a[i] - r[i]));
    solve(hess, rhs)
}

fn solve(hess: DMatrix<f64>, rhs: DVector<f64>) -> Option<Vec<f64>> {
    let x = hess.cholesky()?.solve(&rhs);
    x.iter().all(|v| v.is_finite()).then(|| x.as_slice().to_vec())
}
