//! Hard-negative sampling for contrastive representation learning, built on
//! entropy-regularized optimal transport over mini-batch embeddings.
//!
//! The crate is `no_std` and needs only `alloc`. It contains:
//!
//! * [`ot`]: a log-domain stabilized Sinkhorn solver with forbidden entries,
//!   the product (default) coupling, a KL helper and a brute-force oracle for
//!   the unregularized problem.
//! * [`sampler`]: masked ground cost from unit-norm embeddings, the entropic
//!   OT conditional `P*(j | i)`, the exponential-tilt baseline and samplers.
//! * [`losses`]: triplet, NCE, large-m NCE, debiased NCE and the upper-bound
//!   loss, each with exact gradients with respect to the similarities.
//! * [`encoder`]: an MLP with a unit-sphere projection, reverse-mode
//!   gradients and a decoupled-weight-decay Adam step.
//! * [`objective`]: the batch contrastive objective tying the above together
//!   with the negative distribution held fixed.
#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod encoder;
pub mod losses;
pub mod matrix;
pub mod objective;
pub mod ot;
pub mod sampler;

pub use encoder::{Activation, AdamConfig, AdamState, EncoderError, EncoderParams, ForwardTape};
pub use losses::{LossConfig, LossError, LossKind, LossOutput, SimilarityTriple};
pub use matrix::Matrix;
pub use objective::{BatchLoss, NegativeMode, Negatives, ObjectiveError};
pub use ot::{Coupling, Histogram, MaskedCost, OtError, SinkhornConfig};
pub use sampler::{DistributionKind, EmbeddingBatch, NegativeDistribution, SamplerError, TiltConfig};
