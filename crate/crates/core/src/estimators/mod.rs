//! Reference channel estimators.

pub mod dictionary;
pub mod lmmse;
pub mod omp;
pub mod pgd;

use num_complex::Complex;

use crate::channel::ChannelTensor;

/// Per-subcarrier solver diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub residual_norm: f64,
    pub iterations: usize,
    pub support: Vec<usize>,
    /// Rank deficiency or early stop.
    pub flagged: bool,
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SubcarrierEstimate<T> {
    pub h_hat: Vec<Complex<T>>,
    pub diagnostics: Diagnostics,
}

/// Estimate of a whole realization.
#[derive(Debug, Clone)]
pub struct EstimatorOutput<T> {
    pub h_hat: ChannelTensor<T>,
    pub diagnostics: Vec<Diagnostics>,
}

pub use dictionary::{build_polar_dictionary, polar_projection, GridPoint, PolarDictionary, PolarGrid};
pub use lmmse::{empirical_covariance, lmmse_estimate, LmmseOperator};
pub use omp::{omp_estimate, omp_with_operator, OmpOperator};
pub use pgd::{pgd_estimate, soft_threshold, IdentityProx, L1Prox, PgdInit, PgdOutput, Prox};
