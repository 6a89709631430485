//! Contrastive losses written as functions of the similarities
//! `pos = f(x).f(x+)` and `neg_i = f(x).f(x-_i)`, each returning exact
//! partial derivatives with respect to those similarities.
//!
//! The logistic family (NCE, large-m NCE, debiased NCE) works on
//! `v_i = (neg_i - pos) / temperature`. Triplet and upper-bound losses use the
//! raw similarities.

use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::log_sum_exp;

/// Slack on the unit-sphere bound `|similarity| <= 1`.
pub const SIMILARITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("loss expects {expected} negative(s), got {found}")]
    WrongArity { expected: usize, found: usize },
    #[error("at least one negative similarity is required")]
    NoNegatives,
    #[error("similarity {0} lies outside [-1, 1]")]
    SimilarityOutOfRange(f64),
    #[error("invalid negative weights: {0}")]
    InvalidWeights(&'static str),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("negative expectation must be positive and finite, got {0}")]
    NonPositiveExpectation(f64),
}

/// One anchor's positive similarity and its negative similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTriple {
    pub pos_sim: f64,
    pub neg_sims: Vec<f64>,
    /// Importance weights over the negatives; uniform when absent.
    pub neg_weights: Option<Vec<f64>>,
}

impl SimilarityTriple {
    pub fn new(pos_sim: f64, neg_sims: Vec<f64>) -> Result<Self, LossError> {
        let t = Self {
            pos_sim,
            neg_sims,
            neg_weights: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn weighted(pos_sim: f64, neg_sims: Vec<f64>, weights: Vec<f64>) -> Result<Self, LossError> {
        let t = Self {
            pos_sim,
            neg_sims,
            neg_weights: Some(weights),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.neg_sims.is_empty() {
            return Err(LossError::NoNegatives);
        }
        for &s in core::iter::once(&self.pos_sim).chain(&self.neg_sims) {
            if !(s.abs() <= 1.0 + SIMILARITY_SLACK) {
                return Err(LossError::SimilarityOutOfRange(s));
            }
        }
        if let Some(w) = &self.neg_weights {
            if w.len() != self.neg_sims.len() {
                return Err(LossError::InvalidWeights("one weight per negative is required"));
            }
            if w.iter().any(|x| !(*x >= 0.0)) {
                return Err(LossError::InvalidWeights("weights must be non-negative"));
            }
            if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(LossError::InvalidWeights("weights must sum to 1"));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.neg_sims.len()
    }

    fn log_weight(&self, i: usize) -> f64 {
        match &self.neg_weights {
            Some(w) => libm::log(w[i]),
            None => -libm::log(self.m() as f64),
        }
    }

    fn weight(&self, i: usize) -> f64 {
        match &self.neg_weights {
            Some(w) => w[i],
            None => 1.0 / self.m() as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Triplet,
    Nce,
    LargeMNce,
    DebiasedNce,
    UpperBound,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Triplet margin.
    pub eta: f64,
    /// NCE weight. The library default is 1; harness presets may pick `q = m`.
    pub q: f64,
    /// Class prior of the debiased estimator.
    pub tau_plus: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Nce,
            eta: 0.5,
            q: 1.0,
            tau_plus: 0.1,
            temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn of(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.eta > 0.0) {
            return Err(LossError::InvalidConfig("eta must be positive"));
        }
        if !(self.q > 0.0) || !self.q.is_finite() {
            return Err(LossError::InvalidConfig("q must be positive"));
        }
        if !(0.0..1.0).contains(&self.tau_plus) {
            return Err(LossError::InvalidConfig("tau_plus must lie in [0, 1)"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(LossError::InvalidConfig("temperature must be positive"));
        }
        Ok(())
    }

    /// Value of the loss when every `v_i = 0`, i.e. at a constant representation.
    pub fn value_at_zero(&self) -> f64 {
        match self.kind {
            LossKind::Triplet => self.eta,
            LossKind::Nce | LossKind::LargeMNce => libm::log1p(self.q),
            LossKind::DebiasedNce => {
                let floor = libm::exp(-1.0 / self.temperature);
                libm::log1p(self.q * f64::max(1.0, floor))
            }
            LossKind::UpperBound => 0.0,
        }
    }
}

/// Loss value with `d value / d pos_sim` and `d value / d neg_sims[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub d_pos: f64,
    pub d_neg: Vec<f64>,
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + libm::log1p(libm::exp(-z.abs()))
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `max(0, 2 (neg - pos) + eta)`; the active-side gradient is used at the hinge.
pub fn triplet_loss(t: &SimilarityTriple, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    t.validate()?;
    cfg.validate()?;
    if t.m() != 1 {
        return Err(LossError::WrongArity {
            expected: 1,
            found: t.m(),
        });
    }
    let arg = 2.0 * (t.neg_sims[0] - t.pos_sim) + cfg.eta;
    Ok(if arg >= 0.0 {
        LossOutput {
            value: arg,
            d_pos: -2.0,
            d_neg: vec![2.0],
        }
    } else {
        LossOutput {
            value: 0.0,
            d_pos: 0.0,
            d_neg: vec![0.0],
        }
    })
}

/// `log(1 + q sum_i w_i e^{v_i})`, which is `log(1 + (q/m) sum_i e^{v_i})`
/// for uniform weights.
pub fn nce_loss(t: &SimilarityTriple, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    t.validate()?;
    cfg.validate()?;
    let tau = cfg.temperature;
    let logits: Vec<f64> = (0..t.m())
        .map(|i| t.log_weight(i) + (t.neg_sims[i] - t.pos_sim) / tau)
        .collect();
    let lse = log_sum_exp(logits.iter().copied());
    let z = libm::log(cfg.q) + lse;
    let sig = sigmoid(z);
    let d_neg: Vec<f64> = logits.iter().map(|l| sig * libm::exp(l - lse) / tau).collect();
    Ok(LossOutput {
        value: softplus(z),
        d_pos: -d_neg.iter().sum::<f64>(),
        d_neg,
    })
}

/// Large-m output: gradient with respect to the expectation estimate instead
/// of individual negatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LargeMOutput {
    pub value: f64,
    pub d_pos: f64,
    pub d_expectation: f64,
}

/// `log(1 + q E / e^{pos})` with `E` an estimate of `E[e^{f(x).f(x-)}]`
/// (both exponents divided by the temperature).
pub fn large_m_nce_loss(pos_sim: f64, neg_expectation: f64, cfg: &LossConfig) -> Result<LargeMOutput, LossError> {
    cfg.validate()?;
    if !(neg_expectation > 0.0) || !neg_expectation.is_finite() {
        return Err(LossError::NonPositiveExpectation(neg_expectation));
    }
    let z = libm::log(cfg.q) + libm::log(neg_expectation) - pos_sim / cfg.temperature;
    let sig = sigmoid(z);
    Ok(LargeMOutput {
        value: softplus(z),
        d_pos: -sig / cfg.temperature,
        d_expectation: sig / neg_expectation,
    })
}

/// Large-m NCE with `E` estimated from the triple's negatives and weights,
/// `E = sum_i w_i e^{neg_i / temperature}`, chained back to each negative.
pub fn large_m_nce_batch(t: &SimilarityTriple, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    t.validate()?;
    cfg.validate()?;
    let tau = cfg.temperature;
    let logits: Vec<f64> = (0..t.m()).map(|i| t.log_weight(i) + t.neg_sims[i] / tau).collect();
    let log_e = log_sum_exp(logits.iter().copied());
    let z = libm::log(cfg.q) + log_e - t.pos_sim / tau;
    let sig = sigmoid(z);
    let d_neg = logits.iter().map(|l| sig * libm::exp(l - log_e) / tau).collect();
    Ok(LossOutput {
        value: softplus(z),
        d_pos: -sig / tau,
        d_neg,
    })
}

/// `log(1 + q g)` with the debiased negative moment
/// `g = max((sum_i w_i e^{v_i} - tau+) / (1 - tau+), e^{-1/temperature})`.
///
/// A clamped `g` passes no gradient; at the clamp boundary the unclamped
/// branch is used.
pub fn debiased_nce_loss(t: &SimilarityTriple, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    t.validate()?;
    cfg.validate()?;
    let tau = cfg.temperature;
    let tp = cfg.tau_plus;
    let terms: Vec<f64> = (0..t.m())
        .map(|i| t.weight(i) * libm::exp((t.neg_sims[i] - t.pos_sim) / tau))
        .collect();
    let moment: f64 = terms.iter().sum();
    let raw = (moment - tp) / (1.0 - tp);
    let floor = libm::exp(-1.0 / tau);
    let m = t.m();
    if raw < floor {
        return Ok(LossOutput {
            value: libm::log1p(cfg.q * floor),
            d_pos: 0.0,
            d_neg: vec![0.0; m],
        });
    }
    let outer = cfg.q / (1.0 + cfg.q * raw);
    let d_neg: Vec<f64> = terms.iter().map(|e| outer * e / ((1.0 - tp) * tau)).collect();
    Ok(LossOutput {
        value: libm::log1p(cfg.q * raw),
        d_pos: -d_neg.iter().sum::<f64>(),
        d_neg,
    })
}

/// `sum_i w_i neg_i - pos`.
pub fn upper_bound_loss(t: &SimilarityTriple) -> Result<LossOutput, LossError> {
    t.validate()?;
    let d_neg: Vec<f64> = (0..t.m()).map(|i| t.weight(i)).collect();
    let value = d_neg.iter().zip(&t.neg_sims).map(|(w, s)| w * s).sum::<f64>() - t.pos_sim;
    Ok(LossOutput {
        value,
        d_pos: -1.0,
        d_neg,
    })
}

/// Dispatches on `cfg.kind`. `LargeMNce` uses the in-triple expectation estimate.
pub fn evaluate(t: &SimilarityTriple, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    match cfg.kind {
        LossKind::Triplet => triplet_loss(t, cfg),
        LossKind::Nce => nce_loss(t, cfg),
        LossKind::LargeMNce => large_m_nce_batch(t, cfg),
        LossKind::DebiasedNce => debiased_nce_loss(t, cfg),
        LossKind::UpperBound => upper_bound_loss(t),
    }
}
