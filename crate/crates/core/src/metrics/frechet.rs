//! Gaussian sufficient statistics and the Fréchet distance between them.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::linalg::{self, LinalgError};

#[derive(Debug, Error, PartialEq)]
pub enum FrechetError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample {index} has dimension {got}, expected {expected}")]
    RaggedInput { index: usize, expected: usize, got: usize },
    #[error("sample {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("distance {0:e} is negative beyond rounding noise")]
    Negative(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Noise floor below zero that is clamped rather than reported.
pub const NEGATIVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and unbiased (n - 1) covariance, computed in two passes and symmetrised.
pub fn gaussian_stats(vectors: &[Vec<f64>]) -> Result<GaussianStats, FrechetError> {
    let n = vectors.len();
    if n < 2 {
        return Err(FrechetError::TooFewSamples(n));
    }
    let d = vectors[0].len();
    for (index, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(FrechetError::RaggedInput {
                index,
                expected: d,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(FrechetError::NonFinite(index));
        }
    }
    let mut mean = DVector::zeros(d);
    for v in vectors {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let centred = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    Ok(GaussianStats {
        mean,
        covariance: linalg::symmetrize(&cov),
        sample_count: n,
    })
}

/// `|mu_a - mu_b|^2 + Tr(S_a) + Tr(S_b) - 2 Tr((S_a S_b)^(1/2))`.
///
/// The trace of the product root is taken as `Tr(sqrtm(R S_b R))` with
/// `R = sqrtm(S_a)`, which has the same eigenvalues but keeps every matrix
/// symmetric PSD.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, FrechetError> {
    if a.dim() != b.dim() {
        return Err(FrechetError::DimensionMismatch(a.dim(), b.dim()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let r = linalg::sqrtm_psd(&a.covariance)?;
    let inner = linalg::symmetrize(&(&r * &b.covariance * &r));
    let cross = linalg::sqrtm_psd(&inner)?.trace();
    let d = diff + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    if d < -NEGATIVE_TOL {
        return Err(FrechetError::Negative(d));
    }
    Ok(d.max(0.0))
}
