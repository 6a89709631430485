#![allow(dead_code)]

use hardneg::core::Matrix;
use hardneg::synth::{generate, Labels};
use hardneg::RunConfig;

/// Small but otherwise default run: 10 classes in 16 dimensions.
pub fn small_config() -> RunConfig {
    RunConfig {
        samples_per_class: 40,
        batch_size: 32,
        epochs: 4,
        eval_every: 2,
        hidden: vec![16],
        embed_dim: 8,
        probe_size: 200,
        ..RunConfig::default()
    }
}

pub fn data(cfg: &RunConfig) -> (Matrix, Labels) {
    generate(&cfg.synth_config())
        .expect("valid synthetic config")
        .into_parts()
}

/// Bitwise equality of metric series (NaN equals NaN).
pub fn assert_same_records(a: &[hardneg::MetricsRecord], b: &[hardneg::MetricsRecord]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        let bits = |r: &hardneg::MetricsRecord| {
            (
                r.epoch,
                r.train_loss.to_bits(),
                r.epoch_loss.to_bits(),
                r.readout_accuracy.to_bits(),
                r.representation_variance.to_bits(),
                r.mean_negative_similarity.to_bits(),
                r.same_class_rate.to_bits(),
                r.sinkhorn_fallbacks,
            )
        };
        assert_eq!(bits(x), bits(y), "{x:?} vs {y:?}");
    }
}
