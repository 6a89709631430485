use hardneg::config::LossName;
use hardneg::core::{EmbeddingBatch, Matrix};
use hardneg::degeneracy::{demo_degeneracy, max_similarity_negatives, variance_window_monotonicity, DegeneracyConfig};
use hardneg::synth::generate;
use hardneg::RunConfig;

fn demo(loss: LossName, q: Option<f64>, epochs: usize, early_stop: bool) -> hardneg::degeneracy::DegeneracyReport {
    let cfg = RunConfig {
        loss,
        q,
        ..RunConfig::default()
    };
    let (x, _) = generate(&cfg.synth_config()).unwrap().into_parts();
    let mut d = DegeneracyConfig::new(cfg.train_config());
    d.max_epochs = epochs;
    d.stop_when_collapsed = early_stop;
    demo_degeneracy(&d, &x).unwrap()
}

#[test]
fn argmax_negative_includes_self() {
    let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]).unwrap();
    let b = EmbeddingBatch::new(v).unwrap();
    assert_eq!(max_similarity_negatives(&b), vec![vec![0], vec![1], vec![2]]);
}

#[test]
fn nce_collapses_to_log_two() {
    let r = demo(LossName::Nce, Some(1.0), 500, true);
    assert!((r.collapse_value - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(r.collapsed);
    let last = r.last();
    assert!(last.representation_variance < 1e-3);
    assert!((last.loss - std::f64::consts::LN_2).abs() < 1e-2);
    // approached from above
    for p in &r.trajectory {
        assert!(p.loss >= r.collapse_value - 1e-12, "epoch {} loss {}", p.epoch, p.loss);
    }
}

#[test]
fn upper_bound_loss_collapses_to_zero() {
    let r = demo(LossName::UpperBound, None, 500, true);
    assert_eq!(r.collapse_value, 0.0);
    assert!(r.collapsed);
    assert!(r.last().loss.abs() < 1e-2);
}

#[test]
fn variance_is_eventually_non_increasing_over_ten_epoch_windows() {
    let r = demo(LossName::Nce, Some(1.0), 60, false);
    assert_eq!(r.trajectory.len(), 61);
    assert_eq!(variance_window_monotonicity(&r, 10, 0), 1.0);
    let first = r.trajectory[0].representation_variance;
    assert!(r.last().representation_variance < first * 1e-3);
}
