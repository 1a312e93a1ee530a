use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::linalg::{psd_sqrt, sym_eig, SymMatrix, PSD_TOLERANCE};
use crate::rng;

/// `N(mean, cov)` with a positive semidefinite covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: SymMatrix,
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, cov: SymMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(invalid(format!(
                "mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(invalid("mean has non-finite entries"));
        }
        let min = sym_eig(&cov)?.min_eigenvalue();
        if min < -PSD_TOLERANCE {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
            });
        }
        Ok(GaussianMeasure { mean, cov })
    }

    pub fn centered(cov: SymMatrix) -> Result<Self> {
        Self::new(DVector::zeros(cov.dim()), cov)
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.cov
    }
}

/// Compensated (Neumaier) sum, so that `n` copies of `1/n` add up to 1 to
/// within an ulp regardless of `n`.
fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Weights must be finite, nonnegative and sum to 1 within `1e-12`.
pub(crate) fn check_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(invalid("weights must be finite and nonnegative"));
    }
    let total = compensated_sum(w);
    if (total - 1.0).abs() > 1e-12 {
        return Err(invalid(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// Weighted point cloud; row `i` of `points` carries mass `weights[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: DMatrix<f64>,
    weights: DVector<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(invalid("measure has no atoms"));
        }
        if points.ncols() == 0 {
            return Err(invalid("measure has ambient dimension 0"));
        }
        if weights.len() != points.nrows() {
            return Err(invalid(format!(
                "{} points but {} weights",
                points.nrows(),
                weights.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(invalid("points have non-finite coordinates"));
        }
        check_weights(weights.as_slice())?;
        Ok(DiscreteMeasure { points, weights })
    }

    /// Uniform weights `1/n`.
    pub fn uniform(points: DMatrix<f64>) -> Result<Self> {
        let n = points.nrows();
        Self::new(points, DVector::from_element(n, 1.0 / n.max(1) as f64))
    }

    /// One-dimensional uniform measure on the given locations.
    pub fn uniform_1d(locations: &[f64]) -> Result<Self> {
        Self::uniform(DMatrix::from_column_slice(locations.len(), 1, locations))
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::uniform(DMatrix::from_row_slice(1, point.len(), point))
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|&x| (x - w).abs() <= 1e-15)
    }

    /// Same weights, points multiplied by `s`.
    pub fn scaled(&self, s: f64) -> DiscreteMeasure {
        DiscreteMeasure {
            points: &self.points * s,
            weights: self.weights.clone(),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        self.points.transpose() * &self.weights
    }

    /// Weighted covariance `Σ w_i (x_i − x̄)(x_i − x̄)ᵀ`.
    pub fn covariance(&self) -> SymMatrix {
        let mean = self.mean();
        let mut centered = self.points.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let weighted = DMatrix::from_fn(centered.nrows(), centered.ncols(), |i, k| {
            centered[(i, k)] * self.weights[i]
        });
        SymMatrix::new(centered.transpose() * weighted).expect("covariance of finite points")
    }
}

/// Draws `n` points `mean + cov^{1/2} z` with `z` standard normal.
pub fn sample_gaussian(g: &GaussianMeasure, n: usize, seed: u64) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(invalid("sample_gaussian: n must be at least 1"));
    }
    let d = g.dim();
    let root = psd_sqrt(g.cov())?;
    let mut rng = rng::stream(seed, rng::streams::SAMPLE);
    let mut z = DMatrix::zeros(n, d);
    for i in 0..n {
        for k in 0..d {
            z[(i, k)] = StandardNormal.sample(&mut rng);
        }
    }
    let mut points = z * root.as_matrix();
    for mut row in points.row_iter_mut() {
        row += g.mean().transpose();
    }
    DiscreteMeasure::uniform(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_psd;

    #[test]
    fn validates_weights() {
        let p = DMatrix::zeros(2, 1);
        assert!(DiscreteMeasure::new(p.clone(), DVector::from_vec(vec![0.5, 0.4])).is_err());
        assert!(DiscreteMeasure::new(p.clone(), DVector::from_vec(vec![1.5, -0.5])).is_err());
        assert!(DiscreteMeasure::new(p, DVector::from_vec(vec![1.0, 0.0])).is_ok());
    }

    #[test]
    fn degenerate_gaussian_gives_zero_cloud() {
        let g = GaussianMeasure::centered(SymMatrix::zeros(3)).unwrap();
        let s = sample_gaussian(&g, 5, 1).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.points().iter().all(|&v| v == 0.0));
        assert!(s.weights().iter().all(|&w| w == 0.2));
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = GaussianMeasure::centered(random_psd(3, 2).unwrap()).unwrap();
        assert_eq!(sample_gaussian(&g, 10, 9).unwrap(), sample_gaussian(&g, 10, 9).unwrap());
        assert_ne!(sample_gaussian(&g, 10, 9).unwrap(), sample_gaussian(&g, 10, 10).unwrap());
    }

    #[test]
    fn unit_variance_within_three_standard_errors() {
        let g = GaussianMeasure::centered(SymMatrix::identity(1)).unwrap();
        let n = 100_000;
        let s = sample_gaussian(&g, n, 3).unwrap();
        let second: f64 = s.points().iter().map(|x| x * x).sum::<f64>() / n as f64;
        // Var of x² is 2 for a standard normal.
        let se = (2.0 / n as f64).sqrt();
        assert!((second - 1.0).abs() < 3.0 * se, "second moment {second}");
    }

    #[test]
    fn empirical_covariance_converges() {
        for (d, seed) in [(2usize, 1u64), (5, 2), (8, 3)] {
            let k = random_psd(d, seed).unwrap();
            let g = GaussianMeasure::centered(k.clone()).unwrap();
            for n in [1_000usize, 10_000] {
                let s = sample_gaussian(&g, n, seed + 100).unwrap();
                let err = (s.covariance().as_matrix() - k.as_matrix()).norm();
                assert!(err <= 5.0 * (d as f64 / n as f64).sqrt() * k.frobenius_norm());
            }
        }
    }

    #[test]
    fn mean_is_added() {
        let g = GaussianMeasure::new(DVector::from_vec(vec![3.0, -1.0]), SymMatrix::zeros(2)).unwrap();
        let s = sample_gaussian(&g, 4, 0).unwrap();
        for row in s.points().row_iter() {
            assert_eq!(row[0], 3.0);
            assert_eq!(row[1], -1.0);
        }
    }
}
