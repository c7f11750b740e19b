//! Collapse diagnostics over a batch of normalized predictions: per-dimension
//! spread, spectral effective rank, off-diagonal covariance energy, and mean
//! pairwise distance.
//!
//! Effective rank uses the uncentered second-moment spectrum. Centering would
//! make the measure scale-invariant in the residuals: a batch collapsed onto
//! a single point with isotropic jitter would still report near-full rank.
//! Uncentered, a collapsed batch reports exactly 1.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::losses::{decorrelation_value, diversity_fast_value, PredictionBatch};

#[derive(Clone, Debug)]
pub struct CollapseReport {
    /// sample standard deviation of each embedding dimension
    pub per_dim_std: Vec<f64>,
    /// exp of the entropy of the second-moment eigenspectrum; 1 means collapsed
    pub effective_rank: f64,
    /// sum of squared off-diagonal covariance entries (decorrelation loss)
    pub offdiag_energy: f64,
    /// mean squared distance over all ordered vector pairs
    pub mean_pairdist: f64,
}

/// Eigenvalues -> exp(spectral entropy). A zero spectrum reports rank 1.
pub fn effective_rank(eigenvalues: &[f64]) -> f64 {
    let total: f64 = eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    if total <= 0.0 {
        return 1.0;
    }
    let entropy: f64 = eigenvalues
        .iter()
        .map(|&l| l.max(0.0) / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    entropy.exp()
}

pub fn collapse_metrics(preds: &PredictionBatch) -> Result<CollapseReport> {
    let (n, d) = (preds.n(), preds.dim());
    let rows = preds.rows();

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += rows.at2(i, j);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut moment = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            let da = rows.at2(i, a) - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (rows.at2(i, b) - mean[b]);
                moment[(a, b)] += rows.at2(i, a) * rows.at2(i, b);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            cov[(a, b)] /= denom;
            cov[(b, a)] = cov[(a, b)];
            moment[(a, b)] /= n as f64;
            moment[(b, a)] = moment[(a, b)];
        }
    }

    let per_dim_std = (0..d).map(|j| cov[(j, j)].sqrt()).collect();
    let eigen = moment.symmetric_eigenvalues();
    let effective_rank = effective_rank(eigen.as_slice());
    let offdiag_energy = decorrelation_value(preds)?;
    let mean_pairdist = -diversity_fast_value(preds);
    Ok(CollapseReport { per_dim_std, effective_rank, offdiag_energy, mean_pairdist })
}
