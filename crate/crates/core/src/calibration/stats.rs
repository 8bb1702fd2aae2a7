use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Mat};

pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Mean and ridge-regularized covariance of the correct and incorrect
/// token-feature populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub dim: usize,
    pub ridge: f64,
    pub mu_corr: Vec<f64>,
    pub mu_inc: Vec<f64>,
    pub sigma_corr: Mat,
    pub sigma_inc: Mat,
    pub n_corr: usize,
    pub n_inc: usize,
}

/// Sample mean and unbiased covariance, plus `ridge · (trace / dim) · I`.
pub fn mean_and_covariance(samples: &[Vec<f64>], ridge: f64) -> Result<(Vec<f64>, Mat)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::insufficient(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    let dim = samples[0].len();
    if dim == 0 || samples.iter().any(|s| s.len() != dim) {
        return Err(Error::invalid("feature vectors have inconsistent or zero dimension"));
    }
    if samples.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("feature vectors contain non-finite values"));
    }
    let mut mu = vec![0.0; dim];
    for s in samples {
        for (m, x) in mu.iter_mut().zip(s) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Mat::zeros(dim, dim);
    let mut c = vec![0.0; dim];
    for s in samples {
        for ((ci, x), m) in c.iter_mut().zip(s).zip(&mu) {
            *ci = x - m;
        }
        for i in 0..dim {
            let row = cov.row_mut(i);
            for j in 0..=i {
                row[j] += c[i] * c[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in 0..=i {
            let v = cov.get(i, j) / denom;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    let trace: f64 = (0..dim).map(|i| cov.get(i, i)).sum();
    let mut shift = ridge * trace / dim as f64;
    if shift == 0.0 {
        // zero empirical variance: fall back to an absolute ridge
        shift = ridge;
    }
    for i in 0..dim {
        cov.set(i, i, cov.get(i, i) + shift);
    }
    Ok((mu, cov))
}

/// Fits both populations. Each needs at least two samples and a covariance
/// that factors after regularization.
pub fn fit_stats(correct: &[Vec<f64>], incorrect: &[Vec<f64>], ridge: f64) -> Result<DistributionStats> {
    if !(ridge > 0.0) || !ridge.is_finite() {
        return Err(Error::invalid(format!("ridge must be positive, got {ridge}")));
    }
    let tag = |pop: &str, e: Error| match e {
        Error::InsufficientData(m) => Error::insufficient(format!("{pop} population: {m}")),
        other => other,
    };
    let (mu_corr, sigma_corr) = mean_and_covariance(correct, ridge).map_err(|e| tag("correct", e))?;
    let (mu_inc, sigma_inc) = mean_and_covariance(incorrect, ridge).map_err(|e| tag("incorrect", e))?;
    if mu_corr.len() != mu_inc.len() {
        return Err(Error::invalid("populations have different feature dimensions"));
    }
    let stats = DistributionStats {
        dim: mu_corr.len(),
        ridge,
        mu_corr,
        mu_inc,
        sigma_corr,
        sigma_inc,
        n_corr: correct.len(),
        n_inc: incorrect.len(),
    };
    stats.scorer()?;
    Ok(stats)
}

impl DistributionStats {
    /// Factors both covariances once for repeated distance queries.
    pub fn scorer(&self) -> Result<MahalanobisScorer> {
        Ok(MahalanobisScorer {
            mu_corr: self.mu_corr.clone(),
            mu_inc: self.mu_inc.clone(),
            chol_corr: Cholesky::factor(&self.sigma_corr)?,
            chol_inc: Cholesky::factor(&self.sigma_inc)?,
        })
    }
}

/// `√((v−μ)ᵀ Σ⁻¹ (v−μ))` against a cached factorization.
pub fn mahalanobis_with(v: &[f64], mu: &[f64], chol: &Cholesky) -> Result<f64> {
    if v.len() != mu.len() || v.len() != chol.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: vector {}, mean {}, covariance {}",
            v.len(),
            mu.len(),
            chol.dim()
        )));
    }
    let diff: Vec<f64> = v.iter().zip(mu).map(|(a, b)| a - b).collect();
    Ok(chol.inv_quad_form(&diff).sqrt())
}

/// One-off distance; factors `sigma` on every call.
pub fn mahalanobis(v: &[f64], mu: &[f64], sigma: &Mat) -> Result<f64> {
    mahalanobis_with(v, mu, &Cholesky::factor(sigma)?)
}

/// Cached factorizations of both populations.
#[derive(Debug, Clone)]
pub struct MahalanobisScorer {
    mu_corr: Vec<f64>,
    mu_inc: Vec<f64>,
    chol_corr: Cholesky,
    chol_inc: Cholesky,
}

impl MahalanobisScorer {
    /// `(d_corr, d_inc)`.
    pub fn distances(&self, v: &[f64]) -> Result<(f64, f64)> {
        Ok((
            mahalanobis_with(v, &self.mu_corr, &self.chol_corr)?,
            mahalanobis_with(v, &self.mu_inc, &self.chol_inc)?,
        ))
    }
}
