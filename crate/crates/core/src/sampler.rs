//! Negative-sampling distributions over a mini-batch of embeddings.
//!
//! Row `i` of a [`NegativeDistribution`] is the conditional `P(j | i)` used to
//! draw (or weight) negatives for anchor `i`. The anchor itself, and its
//! positive when the positive is a batch member, always get zero mass.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::{dot, norm, Matrix};
use crate::ot::{self, Coupling, Histogram, MaskedCost, OtError, SinkhornConfig};

/// Row norms may deviate from one by at most this much.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("row {row} has norm {norm}, expected a unit vector")]
    NonUnitNorm { row: usize, norm: f64 },
    #[error("row {0} is (numerically) zero and cannot be projected to the sphere")]
    ZeroVector(usize),
    #[error("invalid positive pairing: {0}")]
    InvalidPairing(&'static str),
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("tilt parameter must be finite and non-negative")]
    InvalidBeta,
    #[error("shape mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error(transparent)]
    Ot(#[from] OtError),
}

/// Unit-norm embeddings of one batch plus the optional in-batch positive map.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Matrix,
    pair_of: Option<Vec<usize>>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Matrix) -> Result<Self, SamplerError> {
        for (row, r) in vectors.row_iter().enumerate() {
            let norm = norm(r);
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(SamplerError::NonUnitNorm { row, norm });
            }
        }
        Ok(Self { vectors, pair_of: None })
    }

    /// Projects every row onto the unit sphere first.
    pub fn normalized(mut raw: Matrix) -> Result<Self, SamplerError> {
        for i in 0..raw.rows() {
            let r = raw.row_mut(i);
            let n = norm(r);
            if !(n >= 1e-12) {
                return Err(SamplerError::ZeroVector(i));
            }
            r.iter_mut().for_each(|x| *x /= n);
        }
        Self::new(raw)
    }

    /// Attaches `pair_of[i]`, the batch index of anchor `i`'s positive.
    pub fn with_pairs(mut self, pair_of: Vec<usize>) -> Result<Self, SamplerError> {
        let n = self.len();
        if pair_of.len() != n {
            return Err(SamplerError::InvalidPairing("pair map length differs from batch size"));
        }
        for (i, &p) in pair_of.iter().enumerate() {
            if p >= n {
                return Err(SamplerError::InvalidPairing("positive index out of range"));
            }
            if p == i {
                return Err(SamplerError::InvalidPairing("an anchor cannot be its own positive"));
            }
        }
        self.pair_of = Some(pair_of);
        Ok(self)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    #[inline]
    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn pair_of(&self) -> Option<&[usize]> {
        self.pair_of.as_deref()
    }

    pub fn into_vectors(self) -> Matrix {
        self.vectors
    }

    /// All pairwise inner products `f_i . f_j`.
    pub fn similarities(&self) -> Matrix {
        self.vectors.gram_with(&self.vectors)
    }

    /// Whether `j` may serve as a negative for anchor `i`.
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        match &self.pair_of {
            Some(p) => p[i] != j && p[j] != i,
            None => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DistributionKind {
    /// Uniform over allowed entries: the default coupling restricted to the batch.
    Uniform,
    Tilt {
        beta: f64,
    },
    EntropicOt {
        epsilon: f64,
    },
}

/// Row-stochastic matrix of conditional negative probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeDistribution {
    pub conditional: Matrix,
    pub kind: DistributionKind,
}

impl NegativeDistribution {
    /// Regularization that produced this distribution; `None` unless entropic OT.
    pub fn epsilon_used(&self) -> Option<f64> {
        match self.kind {
            DistributionKind::EntropicOt { epsilon } => Some(epsilon),
            _ => None,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.conditional.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.conditional.rows() == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.conditional.row(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiltConfig {
    pub beta: f64,
}

/// Ground cost `0.5 ‖f_i - f_j‖² = 1 - f_i . f_j`, with the diagonal and
/// positive pairs forbidden.
pub fn build_cost(batch: &EmbeddingBatch) -> MaskedCost {
    let n = batch.len();
    let sims = batch.similarities();
    let costs = Matrix::from_fn(n, n, |i, j| (1.0 - sims[(i, j)]).max(0.0));
    let forbidden = (0..n * n).map(|k| !batch.is_allowed(k / n, k % n)).collect();
    MaskedCost::new(costs, forbidden).expect("unit-sphere costs are finite and non-negative")
}

fn row_normalize(plan: &Matrix) -> Matrix {
    let mut out = plan.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let s: f64 = r.iter().sum();
        if s > 0.0 {
            r.iter_mut().for_each(|x| *x /= s);
        }
    }
    out
}

/// Conditional of a batch coupling: `P(j | i) = P[i][j] / sum_k P[i][k]`.
pub fn conditional_from_coupling(coupling: &Coupling, epsilon: f64) -> NegativeDistribution {
    NegativeDistribution {
        conditional: row_normalize(&coupling.plan),
        kind: DistributionKind::EntropicOt { epsilon },
    }
}

/// Entropic OT conditional together with the coupling it came from.
///
/// `NotConverged` is passed through unchanged so callers can decide whether
/// the partial coupling is usable.
pub fn ot_negative_coupling(
    batch: &EmbeddingBatch,
    cfg: &SinkhornConfig,
) -> Result<(NegativeDistribution, Coupling), SamplerError> {
    let n = batch.len();
    if n < 3 {
        return Err(SamplerError::TooFewSamples { n, min: 3 });
    }
    let cost = build_cost(batch);
    let h = Histogram::uniform(n);
    let coupling = ot::sinkhorn(&cost, &h, &h, cfg)?;
    Ok((conditional_from_coupling(&coupling, cfg.epsilon), coupling))
}

pub fn ot_negative_distribution(
    batch: &EmbeddingBatch,
    cfg: &SinkhornConfig,
) -> Result<NegativeDistribution, SamplerError> {
    ot_negative_coupling(batch, cfg).map(|(d, _)| d)
}

/// `P(j | i) ∝ exp(beta * f_i . f_j)` over allowed `j`.
pub fn tilt_negative_distribution(
    batch: &EmbeddingBatch,
    cfg: &TiltConfig,
) -> Result<NegativeDistribution, SamplerError> {
    if !(cfg.beta >= 0.0) || !cfg.beta.is_finite() {
        return Err(SamplerError::InvalidBeta);
    }
    let n = batch.len();
    let sims = batch.similarities();
    let mut conditional = Matrix::zeros(n, n);
    for i in 0..n {
        let max = (0..n)
            .filter(|&j| batch.is_allowed(i, j))
            .map(|j| sims[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        let row = conditional.row_mut(i);
        let mut total = 0.0;
        for (j, p) in row.iter_mut().enumerate() {
            if batch.is_allowed(i, j) {
                *p = libm::exp(cfg.beta * (sims[(i, j)] - max));
                total += *p;
            }
        }
        if total > 0.0 {
            row.iter_mut().for_each(|p| *p /= total);
        }
    }
    Ok(NegativeDistribution {
        conditional,
        kind: DistributionKind::Tilt { beta: cfg.beta },
    })
}

/// Uniform over allowed entries in each row.
pub fn uniform_negative_distribution(batch: &EmbeddingBatch) -> NegativeDistribution {
    let n = batch.len();
    let mut conditional = Matrix::from_fn(n, n, |i, j| if batch.is_allowed(i, j) { 1.0 } else { 0.0 });
    conditional = row_normalize(&conditional);
    NegativeDistribution {
        conditional,
        kind: DistributionKind::Uniform,
    }
}

/// Draws `m` IID negatives per row (with replacement) using `rng`.
pub fn sample_negatives_with<R: Rng + ?Sized>(dist: &NegativeDistribution, m: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let n = dist.conditional.cols();
    let mut cumulative = vec![0.0; n];
    let mut out = Vec::with_capacity(dist.len());
    for row in dist.conditional.row_iter() {
        let mut acc = 0.0;
        for (c, p) in cumulative.iter_mut().zip(row) {
            acc += p;
            *c = acc;
        }
        let last_positive = row.iter().rposition(|p| *p > 0.0);
        let mut draws = Vec::with_capacity(m);
        for _ in 0..m {
            let u = rng.random::<f64>() * acc;
            let k = cumulative.partition_point(|c| *c <= u);
            // rounding can leave u at the very top of the range
            let k = if k >= n || row[k] <= 0.0 {
                last_positive.unwrap_or(0)
            } else {
                k
            };
            draws.push(k);
        }
        out.push(draws);
    }
    out
}

/// Deterministic in `seed`.
pub fn sample_negatives(dist: &NegativeDistribution, m: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_negatives_with(dist, m, &mut rng)
}

/// `(1/n) sum_i sum_j P(j | i) f_i . f_j`.
pub fn mean_negative_similarity(batch: &EmbeddingBatch, dist: &NegativeDistribution) -> Result<f64, SamplerError> {
    let n = batch.len();
    if dist.conditional.shape() != (n, n) {
        return Err(SamplerError::DimensionMismatch(
            "distribution must be n x n for a batch of n",
        ));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let v = batch.vectors();
    let mut total = 0.0;
    for i in 0..n {
        for (j, p) in dist.row(i).iter().enumerate() {
            if *p != 0.0 {
                total += p * dot(v.row(i), v.row(j));
            }
        }
    }
    Ok(total / n as f64)
}

/// Fit of `log P(j | i) - f_i . f_j / eps = r_i + log w_j` over entries with
/// positive mass, by alternating row and column means.
#[derive(Clone, Debug, PartialEq)]
pub struct TiltFit {
    /// Largest absolute residual of the two-way additive fit.
    pub residual: f64,
    /// Positive column weights `w_j`, scaled to sum to one.
    pub column_weights: Vec<f64>,
}

pub fn tilt_form_fit(
    batch: &EmbeddingBatch,
    dist: &NegativeDistribution,
    epsilon: f64,
) -> Result<TiltFit, SamplerError> {
    let n = batch.len();
    if dist.conditional.shape() != (n, n) {
        return Err(SamplerError::DimensionMismatch(
            "distribution must be n x n for a batch of n",
        ));
    }
    let sims = batch.similarities();
    let mut target = Matrix::filled(n, n, f64::NAN);
    for i in 0..n {
        for j in 0..n {
            let p = dist.conditional[(i, j)];
            if p > 0.0 {
                target[(i, j)] = libm::log(p) - sims[(i, j)] / epsilon;
            }
        }
    }
    let present = |x: f64| !x.is_nan();
    let mut row_off = vec![0.0; n];
    let mut col_off = vec![0.0; n];
    for _ in 0..10_000 {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let (s, c) = (0..n)
                .filter(|&j| present(target[(i, j)]))
                .fold((0.0, 0usize), |(s, c), j| (s + target[(i, j)] - col_off[j], c + 1));
            if c > 0 {
                let next = s / c as f64;
                change = change.max((next - row_off[i]).abs());
                row_off[i] = next;
            }
        }
        for j in 0..n {
            let (s, c) = (0..n)
                .filter(|&i| present(target[(i, j)]))
                .fold((0.0, 0usize), |(s, c), i| (s + target[(i, j)] - row_off[i], c + 1));
            if c > 0 {
                let next = s / c as f64;
                change = change.max((next - col_off[j]).abs());
                col_off[j] = next;
            }
        }
        if change < 1e-14 {
            break;
        }
    }
    let mut residual: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let t = target[(i, j)];
            if present(t) {
                residual = residual.max((t - row_off[i] - col_off[j]).abs());
            }
        }
    }
    let max_off = col_off.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut column_weights: Vec<f64> = col_off.iter().map(|c| libm::exp(c - max_off)).collect();
    let total: f64 = column_weights.iter().sum();
    column_weights.iter_mut().for_each(|w| *w /= total);
    Ok(TiltFit {
        residual,
        column_weights,
    })
}

/// Mean over rows of the total-variation distance between two distributions.
pub fn mean_total_variation(a: &NegativeDistribution, b: &NegativeDistribution) -> Result<f64, SamplerError> {
    if a.conditional.shape() != b.conditional.shape() {
        return Err(SamplerError::DimensionMismatch("distributions differ in shape"));
    }
    let n = a.len().max(1);
    let tv: f64 = a
        .conditional
        .row_iter()
        .zip(b.conditional.row_iter())
        .map(|(ra, rb)| 0.5 * ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(tv / n as f64)
}
