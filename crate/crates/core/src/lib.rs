//! Entropic optimal transport and linear-generator GANs.
//!
//! - [`linalg`]: symmetric matrices, eigendecompositions, PSD square roots.
//! - [`measure`]: Gaussian and discrete measures, seeded sampling.
//! - [`ot`]: log-domain Sinkhorn, Sinkhorn divergence, exact small-instance
//!   oracles.
//! - [`gaussian`]: closed-form entropic distance between Gaussians and the
//!   population-optimal generators (soft-thresholded and plain r-PCA).
//! - [`gan`]: gradient estimators from Sinkhorn couplings and the SGD loop.

pub mod error;
pub mod gan;
pub mod gaussian;
pub mod linalg;
pub mod measure;
pub mod ot;
pub mod rng;

pub use error::{Error, Result};
pub use gan::{
    cov_frobenius, entropic_grad, generator_output_cov, sinkhorn_grad, train_sgd, train_sgd_observed,
    DataSampling, IterationRecord, LinearGenerator, LossKind, StepSchedule, TrainConfig, TrainSeeds,
    TrainTrace, SELF_TERM_COEFFICIENT,
};
pub use gaussian::{
    entropic_population_value, gaussian_entropic_w2, r_pca, sinkhorn_subspace_objective, soft_threshold_pca,
};
pub use linalg::{psd_sqrt, random_psd, sym_eig, EigDecomposition, SymMatrix};
pub use measure::{sample_gaussian, DiscreteMeasure, GaussianMeasure};
pub use ot::{
    brute_force_entropic, coupling_from_potentials, cost_matrix, entropic_w2_discrete, exact_w2,
    sinkhorn_divergence_discrete, sinkhorn_potentials, symmetric_potential, CostMatrix, Coupling,
    DualPotentials, SinkhornParams,
};
