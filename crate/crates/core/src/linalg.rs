//! Dense symmetric linear algebra.
//!
//! [`SymMatrix`] is the only matrix type that crosses module boundaries for
//! covariances. Construction symmetrizes its input, so `m[(i, j)] == m[(j, i)]`
//! holds bit-for-bit afterwards.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Eigenvalues in `[-PSD_TOLERANCE, 0)` are treated as rounding noise and
/// clamped to zero; anything more negative is rejected.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Builds a symmetric matrix from a square one as `(m + mᵀ) / 2`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(invalid(format!(
                "matrix is {}x{}, expected square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(invalid("matrix has dimension 0"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("matrix has non-finite entries"));
        }
        let n = m.nrows();
        let mut s = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = (s[(i, j)] + s[(j, i)]) / 2.0;
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(SymMatrix(s))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        SymMatrix(&self.0 * factor)
    }

    /// `B M Bᵀ` for a rectangular `B`.
    pub fn congruence(&self, b: &DMatrix<f64>) -> Result<SymMatrix> {
        if b.ncols() != self.dim() {
            return Err(invalid("congruence: dimension mismatch"));
        }
        SymMatrix::new(b * &self.0 * b.transpose())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Spectral decomposition with eigenvalues sorted descending. Column `i` of
/// `eigenvectors` belongs to `eigenvalues[i]`, and the largest-magnitude
/// component of every column is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EigDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.eigenvectors
            * DMatrix::from_diagonal(&self.eigenvalues)
            * self.eigenvectors.transpose()
    }

    /// `V f(Λ) Vᵀ`.
    pub fn map_eigenvalues(&self, f: impl Fn(usize, f64) -> f64) -> Result<SymMatrix> {
        let mapped = DVector::from_iterator(
            self.eigenvalues.len(),
            self.eigenvalues.iter().enumerate().map(|(i, &v)| f(i, v)),
        );
        SymMatrix::new(
            &self.eigenvectors * DMatrix::from_diagonal(&mapped) * self.eigenvectors.transpose(),
        )
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }
}

pub fn sym_eig(m: &SymMatrix) -> Result<EigDecomposition> {
    if m.0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("sym_eig: non-finite entries"));
    }
    let n = m.dim();
    let eig = m.0.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the solver's order among exact ties.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            eigenvectors[(i, col)] = sign * v[i];
        }
    }
    Ok(EigDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Eigendecomposition of a PSD matrix with tiny negative eigenvalues clamped.
pub fn psd_eig(m: &SymMatrix) -> Result<EigDecomposition> {
    let mut eig = sym_eig(m)?;
    let min = eig.min_eigenvalue();
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// Symmetric PSD square root.
pub fn psd_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    psd_eig(m)?.map_eigenvalues(|_, v| v.sqrt())
}

/// A random PSD matrix `A Aᵀ` with standard-normal `A`, scaled to unit
/// Frobenius norm.
pub fn random_psd(d: usize, seed: u64) -> Result<SymMatrix> {
    if d == 0 {
        return Err(invalid("random_psd: d must be at least 1"));
    }
    let mut rng = rng::stream(seed, rng::streams::RANDOM_PSD);
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let k = SymMatrix::new(&a * a.transpose())?;
    let norm = k.frobenius_norm();
    SymMatrix::new(k.0 / norm)
}

/// Relative Frobenius error `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation2;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn random_sym(n: usize, seed: u64) -> SymMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        SymMatrix::new(a).unwrap()
    }

    #[test]
    fn construction_symmetrizes_exactly() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.1 + 0.2, 2.0]);
        let s = SymMatrix::new(m).unwrap();
        assert_eq!(s[(0, 1)].to_bits(), s[(1, 0)].to_bits());
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(SymMatrix::new(DMatrix::zeros(2, 3)).is_err());
        assert!(SymMatrix::new(DMatrix::from_element(2, 2, f64::NAN)).is_err());
    }

    #[test]
    fn identity_eigenvalues() {
        let e = sym_eig(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_eigen_is_sorted_permutation() {
        let e = sym_eig(&SymMatrix::from_diagonal(&[1.0, 3.0, 2.0]).unwrap()).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[3.0, 2.0, 1.0]);
        let expected = DMatrix::from_row_slice(3, 3, &[0., 0., 1., 1., 0., 0., 0., 1., 0.]);
        assert_eq!(e.eigenvectors, expected);
    }

    #[test]
    fn random_symmetric_reconstructs() {
        let m = random_sym(5, 11);
        let e = sym_eig(&m).unwrap();
        assert!(relative_frobenius(&e.reconstruct(), m.as_matrix()) < 1e-8);
        let gram = e.eigenvectors.transpose() * &e.eigenvectors;
        assert!((gram - DMatrix::identity(5, 5)).abs().max() < 1e-10);
    }

    #[test]
    fn sqrt_of_diagonal() {
        let s = psd_sqrt(&SymMatrix::from_diagonal(&[4.0, 9.0]).unwrap()).unwrap();
        assert!((s.as_matrix() - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])))
            .abs()
            .max()
            < 1e-14);
        let i = psd_sqrt(&SymMatrix::identity(3)).unwrap();
        assert!((i.as_matrix() - DMatrix::identity(3, 3)).abs().max() < 1e-15);
    }

    #[test]
    fn sqrt_of_rotated_matrix_squares_back() {
        let rot = Rotation2::new(std::f64::consts::PI / 6.0);
        let r = DMatrix::from_row_slice(2, 2, rot.matrix().as_slice()).transpose();
        let m = SymMatrix::new(&r * DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])) * r.transpose())
            .unwrap();
        let s = psd_sqrt(&m).unwrap();
        let sq = s.as_matrix() * s.as_matrix();
        assert!(relative_frobenius(&sq, m.as_matrix()) < 1e-8);
    }

    #[test]
    fn sqrt_rejects_negative_definite() {
        let m = SymMatrix::from_diagonal(&[1.0, -1e-6]).unwrap();
        assert!(matches!(psd_sqrt(&m), Err(Error::NotPsd { .. })));
        // within the clamp band
        let m = SymMatrix::from_diagonal(&[1.0, -1e-12]).unwrap();
        assert!(psd_sqrt(&m).is_ok());
    }

    #[test]
    fn random_psd_one_dimensional_is_one() {
        for seed in 0..20 {
            let k = random_psd(1, seed).unwrap();
            assert_eq!(k[(0, 0)], 1.0);
        }
    }

    #[test]
    fn random_psd_is_deterministic() {
        let a = random_psd(4, 7).unwrap();
        let b = random_psd(4, 7).unwrap();
        assert!(a
            .as_matrix()
            .iter()
            .zip(b.as_matrix().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(random_psd(0, 1).is_err());
    }

    #[test]
    fn random_psd_32_is_normalized_psd() {
        let k = random_psd(32, 1).unwrap();
        assert!((k.frobenius_norm() - 1.0).abs() < 1e-12);
        assert!(sym_eig(&k).unwrap().min_eigenvalue() >= -PSD_TOLERANCE);
    }

    #[test]
    fn random_psd_many_seeds() {
        for seed in 0..100 {
            let k = random_psd(6, seed).unwrap();
            assert!((k.frobenius_norm() - 1.0).abs() < 1e-12);
            assert!(psd_eig(&k).unwrap().min_eigenvalue() >= 0.0);
        }
    }

    proptest! {
        #[test]
        fn eig_reconstructs(n in 1usize..8, seed in any::<u64>()) {
            let m = random_sym(n, seed);
            let e = sym_eig(&m).unwrap();
            prop_assert!(relative_frobenius(&e.reconstruct(), m.as_matrix()) < 1e-8);
            for w in e.eigenvalues.as_slice().windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
        }

        #[test]
        fn sqrt_squares_back(n in 1usize..8, seed in any::<u64>()) {
            let m = random_psd(n, seed).unwrap();
            let s = psd_sqrt(&m).unwrap();
            let sq = s.as_matrix() * s.as_matrix();
            prop_assert!(relative_frobenius(&sq, m.as_matrix()) < 1e-8);
        }
    }
}
