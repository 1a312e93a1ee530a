//! Soft-min updates through a cached, stabilized Gibbs kernel.
//!
//! Around reference potentials `(φ₀, ψ₀)` the kernel
//! `K_ij = exp((φ₀_i + ψ₀_j − C_ij) / λ)` is formed once, after which
//!
//! ```text
//! (T_b ψ)_i = φ₀_i − λ ln Σ_j b_j K_ij exp((ψ_j − ψ₀_j) / λ)
//! ```
//!
//! costs one multiply-add per entry instead of one exponential. Near the
//! optimum `K_ij = π_ij / (a_i b_j)`, so entries that matter stay of order
//! one. Once a potential drifts more than `ABSORB · λ` from its reference,
//! the caller rebuilds the kernel around the current pair.

use rayon::prelude::*;

use super::CostMatrix;

const ABSORB: f64 = 16.0;

pub(super) struct Kernel {
    rows: Vec<f64>,
    /// Transposed copy; `None` for a symmetric kernel.
    cols: Option<Vec<f64>>,
    n: usize,
    m: usize,
    lambda: f64,
    phi0: Vec<f64>,
    psi0: Vec<f64>,
}

fn parallel(entries: usize) -> bool {
    entries >= super::sinkhorn::PARALLEL_MIN_ENTRIES
}

impl Kernel {
    pub(super) fn new(cost: &CostMatrix, phi0: &[f64], psi0: &[f64], lambda: f64, symmetric: bool) -> Self {
        let (n, m) = (cost.nrows(), cost.ncols());
        let inv = 1.0 / lambda;
        let mut rows = vec![0.0; n * m];
        let fill = |(i, row): (usize, &mut [f64])| {
            for ((k, c), q) in row.iter_mut().zip(cost.row(i)).zip(psi0) {
                *k = ((phi0[i] + q - c) * inv).exp();
            }
        };
        if parallel(n * m) {
            rows.par_chunks_mut(m).enumerate().for_each(fill);
        } else {
            rows.chunks_mut(m).enumerate().for_each(fill);
        }
        let cols = (!symmetric).then(|| {
            let mut t = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    t[j * n + i] = rows[i * m + j];
                }
            }
            t
        });
        Kernel {
            rows,
            cols,
            n,
            m,
            lambda,
            phi0: phi0.to_vec(),
            psi0: psi0.to_vec(),
        }
    }

    fn within(reference: &[f64], pot: &[f64], lambda: f64) -> bool {
        reference.iter().zip(pot).all(|(r, p)| ((p - r) / lambda).abs() <= ABSORB)
    }

    /// Whether `(phi, psi)` is close enough to the reference pair.
    pub(super) fn covers(&self, phi: &[f64], psi: &[f64]) -> bool {
        Self::within(&self.phi0, phi, self.lambda) && Self::within(&self.psi0, psi, self.lambda)
    }

    /// `out = T_b psi`. Returns `false`, leaving `out` unspecified, if some
    /// row of the kernel has underflowed against `psi`.
    pub(super) fn softmin_rows(&self, b: &[f64], psi: &[f64], out: &mut [f64]) -> bool {
        apply(&self.rows, self.m, &self.phi0, &self.psi0, b, psi, self.lambda, out)
    }

    /// `out = T_a phi`.
    pub(super) fn softmin_cols(&self, a: &[f64], phi: &[f64], out: &mut [f64]) -> bool {
        let t = self.cols.as_ref().unwrap_or(&self.rows);
        apply(t, self.n, &self.psi0, &self.phi0, a, phi, self.lambda, out)
    }
}

#[allow(clippy::too_many_arguments)]
fn apply(
    k: &[f64],
    width: usize,
    out_ref: &[f64],
    in_ref: &[f64],
    w: &[f64],
    pot: &[f64],
    lambda: f64,
    out: &mut [f64],
) -> bool {
    let inv = 1.0 / lambda;
    let scaled: Vec<f64> = w
        .iter()
        .zip(pot.iter().zip(in_ref))
        .map(|(w, (p, r))| w * ((p - r) * inv).exp())
        .collect();
    let row = |(i, o): (usize, &mut f64)| {
        let s = dot(&k[i * width..(i + 1) * width], &scaled);
        *o = out_ref[i] - lambda * s.ln();
    };
    if parallel(k.len()) {
        out.par_iter_mut().enumerate().for_each(row);
    } else {
        out.iter_mut().enumerate().for_each(row);
    }
    out.iter().all(|v| v.is_finite())
}

/// Dot product with four fixed accumulators, so the summation order depends
/// only on the length.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, xr) = x.split_at(x.len() - x.len() % 4);
    let (yc, yr) = y.split_at(xc.len());
    for (p, q) in xc.chunks_exact(4).zip(yc.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += p[l] * q[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (p, q) in xr.iter().zip(yr) {
        s += p * q;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost() -> CostMatrix {
        let x = [0.0, 0.4, 1.1, -0.7];
        let y = [0.2, -0.3, 0.9];
        let e: Vec<f64> = x.iter().flat_map(|a| y.iter().map(move |b| (a - b) * (a - b))).collect();
        CostMatrix::from_row_major(4, 3, e).unwrap()
    }

    fn softmin(c: &CostMatrix, w: &[f64], pot: &[f64], lambda: f64, i: usize, by_row: bool) -> f64 {
        let len = if by_row { c.ncols() } else { c.nrows() };
        let s: f64 = (0..len)
            .map(|j| {
                let cij = if by_row { c.get(i, j) } else { c.get(j, i) };
                w[j] * ((pot[j] - cij) / lambda).exp()
            })
            .sum();
        -lambda * s.ln()
    }

    #[test]
    fn matches_direct_soft_min() {
        let c = cost();
        let (a, b) = ([0.1, 0.2, 0.3, 0.4], [0.5, 0.25, 0.25]);
        let (phi0, psi0) = ([0.1, -0.2, 0.05, 0.3], [0.0, 0.2, -0.1]);
        let lambda = 0.3;
        let k = Kernel::new(&c, &phi0, &psi0, lambda, false);
        let psi = [0.4, -0.1, 0.2];
        let phi = [0.2, 0.1, -0.3, 0.0];
        let mut out = [0.0; 4];
        assert!(k.softmin_rows(&b, &psi, &mut out));
        for i in 0..4 {
            assert!((out[i] - softmin(&c, &b, &psi, lambda, i, true)).abs() < 1e-13);
        }
        let mut out = [0.0; 3];
        assert!(k.softmin_cols(&a, &phi, &mut out));
        for j in 0..3 {
            assert!((out[j] - softmin(&c, &a, &phi, lambda, j, false)).abs() < 1e-13);
        }
    }

    #[test]
    fn coverage_tracks_drift() {
        let c = cost();
        let k = Kernel::new(&c, &[0.0; 4], &[0.0; 3], 0.1, false);
        assert!(k.covers(&[0.0; 4], &[1.5, 0.0, 0.0]));
        assert!(!k.covers(&[0.0; 4], &[1.7, 0.0, 0.0]));
    }
}
