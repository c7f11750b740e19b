//! The three training objectives: alignment, diversity, decorrelation.
//!
//! Each loss exists twice: a graph form used for training (differentiable
//! w.r.t. the prediction matrix) and a plain-value form used as an oracle or
//! diagnostic. `diversity_bruteforce` is the O(n^2 d) pairwise reference the
//! O(nd) closed form is checked against.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::ops;
use crate::tensor::Tensor;

/// A batch of n L2-normalized prediction vectors of dimension d.
/// Stored with one vector per row (n x d).
#[derive(Clone, Debug)]
pub struct PredictionBatch {
    rows: Tensor,
}

impl PredictionBatch {
    pub fn from_rows(rows: Tensor) -> Result<PredictionBatch> {
        if rows.rank() != 2 {
            return Err(Error::contract(format!(
                "prediction batch expects [n, d], got {:?}",
                rows.shape()
            )));
        }
        let (n, d) = (rows.shape()[0], rows.shape()[1]);
        for i in 0..n {
            let norm: f64 = (0..d).map(|j| rows.at2(i, j).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "prediction row {i} has norm {norm}, expected 1 within 1e-6"
                )));
            }
        }
        Ok(PredictionBatch { rows })
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Result<PredictionBatch> {
        let n = cols.len();
        let d = cols.first().map(|c| c.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * d);
        for c in cols {
            if c.len() != d {
                return Err(Error::contract("ragged prediction columns".to_string()));
            }
            data.extend_from_slice(c);
        }
        PredictionBatch::from_rows(Tensor::from_vec(vec![n, d], data))
    }

    pub fn n(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub diversity: f64,
    pub decorrelation: f64,
}

impl LossWeights {
    pub fn new(diversity: f64, decorrelation: f64) -> Result<LossWeights> {
        if diversity < 0.0 || decorrelation < 0.0 {
            return Err(Error::contract(format!(
                "loss weights must be non-negative, got ({diversity}, {decorrelation})"
            )));
        }
        Ok(LossWeights { diversity, decorrelation })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { diversity: 1.0, decorrelation: 1.0 }
    }
}

// -- graph forms ----------------------------------------------------------------

/// Mean over the batch of the squared distance between normalized prediction
/// and target rows. Value lies in [0, 4] for unit rows.
pub fn alignment_loss(preds: &Var, targets: &Var) -> Result<Var> {
    if preds.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "alignment_loss",
            lhs: preds.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let n = preds.shape()[0] as f64;
    let diff = ops::sub(preds, targets)?;
    Ok(ops::scale(&ops::sum_all(&ops::mul(&diff, &diff)?), 1.0 / n))
}

/// Closed-form diversity loss, (2/n^2) ||V 1||^2 - 2: the negative mean
/// pairwise squared distance over all n^2 ordered pairs. O(nd).
pub fn diversity_loss_fast(preds: &Var) -> Result<Var> {
    if preds.shape().len() != 2 {
        return Err(Error::contract(format!(
            "diversity loss expects [n, d], got {:?}",
            preds.shape()
        )));
    }
    let n = preds.shape()[0] as f64;
    let colsum = ops::reduce_sum_axis(preds, 0)?;
    let sq = ops::sum_all(&ops::mul(&colsum, &colsum)?);
    Ok(ops::add_scalar(&ops::scale(&sq, 2.0 / (n * n)), -2.0))
}

/// Sum of squared off-diagonal entries of the covariance of the prediction
/// rows (1/(n-1) normalization around the batch mean).
pub fn decorrelation_loss(preds: &Var) -> Result<Var> {
    let s = preds.shape();
    if s.len() != 2 {
        return Err(Error::contract(format!("decorrelation loss expects [n, d], got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    if n < 2 {
        return Err(Error::contract(format!("decorrelation loss needs n >= 2, got {n}")));
    }
    let mean = ops::reduce_mean_axis(preds, 0)?;
    let centered = ops::add_row_bias(preds, &ops::scale(&mean, -1.0))?;
    let cov = ops::scale(&ops::matmul(&ops::transpose2d(&centered)?, &centered)?, 1.0 / (n as f64 - 1.0));
    // zero out the diagonal with a constant mask
    let mut mask = vec![1.0; d * d];
    for i in 0..d {
        mask[i * d + i] = 0.0;
    }
    let mask = Var::leaf(Tensor::from_vec(vec![d, d], mask), false);
    Ok(ops::sum_all(&ops::mul(&ops::mul(&cov, &cov)?, &mask)?))
}

/// align + lambda_div * diversity + lambda_dec * decorrelation.
pub fn total_loss(align: &Var, diversity: &Var, decorrelation: &Var, w: &LossWeights) -> Result<Var> {
    let weighted = ops::add(
        &ops::scale(diversity, w.diversity),
        &ops::scale(decorrelation, w.decorrelation),
    )?;
    ops::add(align, &weighted)
}

// -- value forms ------------------------------------------------------------------

pub fn alignment_value(preds: &PredictionBatch, targets: &PredictionBatch) -> Result<f64> {
    let p = Var::leaf(preds.rows().clone(), false);
    let t = Var::leaf(targets.rows().clone(), false);
    Ok(alignment_loss(&p, &t)?.value().item())
}

/// Pairwise oracle: -(1/n^2) sum over all ordered pairs (i, j), including
/// i = j, of ||v_i - v_j||^2.
pub fn diversity_bruteforce(preds: &PredictionBatch) -> f64 {
    let (n, d) = (preds.n(), preds.dim());
    let rows = preds.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut dist = 0.0;
            for k in 0..d {
                let delta = rows.at2(i, k) - rows.at2(j, k);
                dist += delta * delta;
            }
            acc += dist;
        }
    }
    -acc / (n * n) as f64
}

pub fn diversity_fast_value(preds: &PredictionBatch) -> f64 {
    let p = Var::leaf(preds.rows().clone(), false);
    diversity_loss_fast(&p).expect("validated batch").value().item()
}

pub fn decorrelation_value(preds: &PredictionBatch) -> Result<f64> {
    let p = Var::leaf(preds.rows().clone(), false);
    Ok(decorrelation_loss(&p)?.value().item())
}

pub fn total_value(align: f64, diversity: f64, decorrelation: f64, w: &LossWeights) -> f64 {
    align + w.diversity * diversity + w.decorrelation * decorrelation
}
