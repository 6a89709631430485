//! Batch contrastive objective over anchor and positive embeddings.
//!
//! Negatives for anchor `i` are other anchors of the same batch, either drawn
//! as explicit indices or weighted by a full conditional row. The negative
//! distribution is treated as a constant: gradients flow through the
//! similarities only.

use alloc::vec::Vec;

use crate::losses::{self, LossConfig, LossError, SimilarityTriple};
use crate::matrix::{dot, Matrix};
use crate::sampler::{EmbeddingBatch, NegativeDistribution};

/// How negatives enter the loss during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeMode {
    /// Use each conditional row as importance weights over all batch members.
    Weighted,
    /// Draw `m` negatives per anchor, with replacement.
    Sampled { m: usize },
}

/// Negatives for one batch evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Negatives<'a> {
    Weighted(&'a NegativeDistribution),
    /// `indices[i]` lists the batch rows used as negatives for anchor `i`.
    /// An anchor may appear among its own negatives.
    Indices(&'a [Vec<usize>]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    /// Mean loss over anchors.
    pub value: f64,
    pub d_anchors: Matrix,
    pub d_positives: Matrix,
    pub mean_pos_sim: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("anchor {0} has no negatives")]
    NoNegatives(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub fn batch_loss(
    anchors: &EmbeddingBatch,
    positives: &EmbeddingBatch,
    negatives: Negatives<'_>,
    cfg: &LossConfig,
) -> Result<BatchLoss, ObjectiveError> {
    let n = anchors.len();
    let d = anchors.dim();
    if positives.len() != n || positives.dim() != d {
        return Err(ObjectiveError::DimensionMismatch(
            "anchors and positives must have the same shape",
        ));
    }
    match negatives {
        Negatives::Weighted(dist) if dist.conditional.shape() != (n, n) => {
            return Err(ObjectiveError::DimensionMismatch("negative distribution must be n x n"));
        }
        Negatives::Indices(idx) if idx.len() != n || idx.iter().flatten().any(|&j| j >= n) => {
            return Err(ObjectiveError::DimensionMismatch(
                "negative indices must reference batch rows",
            ));
        }
        _ => {}
    }
    if n == 0 {
        return Ok(BatchLoss {
            value: 0.0,
            d_anchors: Matrix::zeros(0, d),
            d_positives: Matrix::zeros(0, d),
            mean_pos_sim: 0.0,
        });
    }

    let a = anchors.vectors();
    let p = positives.vectors();
    let scale = 1.0 / n as f64;
    let mut d_anchors = Matrix::zeros(n, d);
    let mut d_positives = Matrix::zeros(n, d);
    let mut value = 0.0;
    let mut pos_total = 0.0;

    let mut neg_index: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let pos_sim = dot(a.row(i), p.row(i));
        pos_total += pos_sim;
        neg_index.clear();
        let triple = match negatives {
            Negatives::Weighted(dist) => {
                let row = dist.row(i);
                neg_index.extend((0..n).filter(|&j| row[j] > 0.0));
                let total: f64 = neg_index.iter().map(|&j| row[j]).sum();
                SimilarityTriple {
                    pos_sim,
                    neg_sims: neg_index.iter().map(|&j| dot(a.row(i), a.row(j))).collect(),
                    neg_weights: Some(neg_index.iter().map(|&j| row[j] / total).collect()),
                }
            }
            Negatives::Indices(idx) => {
                neg_index.extend_from_slice(&idx[i]);
                SimilarityTriple {
                    pos_sim,
                    neg_sims: neg_index.iter().map(|&j| dot(a.row(i), a.row(j))).collect(),
                    neg_weights: None,
                }
            }
        };
        if neg_index.is_empty() {
            return Err(ObjectiveError::NoNegatives(i));
        }
        let out = losses::evaluate(&triple, cfg)?;
        value += out.value * scale;

        let gp = out.d_pos * scale;
        for c in 0..d {
            d_anchors[(i, c)] += gp * p[(i, c)];
            d_positives[(i, c)] += gp * a[(i, c)];
        }
        for (&j, g) in neg_index.iter().zip(&out.d_neg) {
            let g = g * scale;
            if g == 0.0 {
                continue;
            }
            for c in 0..d {
                let (ai, aj) = (a[(i, c)], a[(j, c)]);
                d_anchors[(i, c)] += g * aj;
                d_anchors[(j, c)] += g * ai;
            }
        }
    }
    Ok(BatchLoss {
        value,
        d_anchors,
        d_positives,
        mean_pos_sim: pos_total * scale,
    })
}
