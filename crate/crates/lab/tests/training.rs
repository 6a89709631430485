mod common;

use common::{assert_same_records, data, small_config};
use hardneg::config::SamplerName;
use hardneg::synth::Labels;
use hardneg::train::{best_accuracy, evaluate, sweep_eps, train, train_from, Evaluator, TrainState};
use hardneg::{HarnessError, RunConfig};

#[test]
fn zero_epochs_is_a_config_error() {
    let cfg = RunConfig {
        epochs: 0,
        ..small_config()
    };
    let (x, _) = data(&cfg);
    let err = train(&cfg.train_config(), &x, None).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn dataset_smaller_than_two_batches_is_rejected() {
    let cfg = RunConfig {
        samples_per_class: 5,
        probe_size: 50,
        ..small_config()
    };
    let (x, _) = data(&cfg);
    assert!(matches!(
        train(&cfg.train_config(), &x, None),
        Err(HarnessError::Config(_))
    ));
}

#[test]
fn zero_learning_rate_freezes_everything() {
    for sampler in [SamplerName::Uniform, SamplerName::Tilt, SamplerName::Ot] {
        let cfg = RunConfig {
            lr: 0.0,
            weight_decay: 0.0,
            sampler,
            epochs: 3,
            eval_every: 1,
            ..small_config()
        };
        let (x, labels) = data(&cfg);
        let tc = cfg.train_config();
        let ev = Evaluator::new(&labels, cfg.probe_size).unwrap();
        let initial = TrainState::init(&tc, x.cols()).unwrap();
        let (fin, records) = train(&tc, &x, Some(&ev)).unwrap();
        assert_eq!(fin.params, initial.params);
        assert_eq!(records.len(), 4);
        for r in &records {
            assert_eq!(r.train_loss.to_bits(), records[0].train_loss.to_bits());
            assert_eq!(r.readout_accuracy.to_bits(), records[0].readout_accuracy.to_bits());
            assert_eq!(
                r.representation_variance.to_bits(),
                records[0].representation_variance.to_bits()
            );
        }
        assert!(records[0].epoch_loss.is_nan());
    }
}

#[test]
fn same_seed_same_run() {
    let cfg = small_config();
    let (x, labels) = data(&cfg);
    let ev = Evaluator::new(&labels, cfg.probe_size).unwrap();
    let a = train(&cfg.train_config(), &x, Some(&ev)).unwrap();
    let b = train(&cfg.train_config(), &x, Some(&ev)).unwrap();
    assert_eq!(a.0, b.0);
    assert_same_records(&a.1, &b.1);
    let c = train(&RunConfig { seed: 1, ..cfg.clone() }.train_config(), &x, Some(&ev)).unwrap();
    assert_ne!(a.0.params, c.0.params);
}

#[test]
fn labels_never_reach_training() {
    let cfg = RunConfig {
        sampler: SamplerName::Ot,
        ..small_config()
    };
    let (x, labels) = data(&cfg);
    let zeroed = Labels {
        labels: vec![0; labels.labels.len()],
        num_classes: labels.num_classes,
    };
    let tc = cfg.train_config();
    let ev = Evaluator::new(&labels, cfg.probe_size).unwrap();
    let ev_zero = Evaluator::new(&zeroed, cfg.probe_size).unwrap();
    let (with_labels, r1) = train(&tc, &x, Some(&ev)).unwrap();
    let (zero_labels, r2) = train(&tc, &x, Some(&ev_zero)).unwrap();
    let (no_labels, r3) = train(&tc, &x, None).unwrap();
    assert_eq!(with_labels, zero_labels);
    assert_eq!(with_labels, no_labels);

    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = [&with_labels, &zero_labels, &no_labels]
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let p = dir.path().join(format!("{k}.json"));
            hardneg::io::save_checkpoint(&p, s, &cfg).unwrap();
            std::fs::read(p).unwrap()
        })
        .collect();
    assert_eq!(paths[0], paths[1]);
    assert_eq!(paths[0], paths[2]);

    // only the label-dependent columns may differ
    for ((a, b), c) in r1.iter().zip(&r2).zip(&r3) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.train_loss.to_bits(), c.train_loss.to_bits());
        assert_eq!(a.representation_variance.to_bits(), c.representation_variance.to_bits());
        assert!(c.readout_accuracy.is_nan() && c.same_class_rate.is_nan());
    }
}

#[test]
fn evaluator_with_too_few_labels_fails_only_evaluation() {
    let cfg = small_config();
    let (x, labels) = data(&cfg);
    let short = Labels {
        labels: labels.labels[..10].to_vec(),
        num_classes: 10,
    };
    assert!(Evaluator::new(&short, cfg.probe_size).is_err());
    let ev = Evaluator::new(&short, 10).unwrap();
    let state = TrainState::init(&cfg.train_config(), x.cols()).unwrap();
    assert!(evaluate(&state, &cfg.train_config(), &x, Some(&ev), f64::NAN).is_err());
    assert!(evaluate(&state, &cfg.train_config(), &x, None, f64::NAN).is_ok());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let cfg = RunConfig {
        epochs: 4,
        eval_every: 1,
        ..small_config()
    };
    let (x, _) = data(&cfg);
    let (full, full_records) = train(&cfg.train_config(), &x, None).unwrap();

    let half = RunConfig {
        epochs: 2,
        ..cfg.clone()
    };
    let (mid, first) = train(&half.train_config(), &x, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    hardneg::io::save_checkpoint(&path, &mid, &half).unwrap();
    let (loaded, _) = hardneg::io::load_checkpoint(&path).unwrap();
    let (resumed, second) = train_from(loaded, &cfg.train_config(), &x, None).unwrap();

    assert_eq!(resumed, full);
    let stitched: Vec<_> = first.into_iter().chain(second).collect();
    assert_same_records(&stitched, &full_records);
}

#[test]
fn records_follow_eval_every_and_include_the_last_epoch() {
    let cfg = RunConfig {
        epochs: 5,
        eval_every: 2,
        ..small_config()
    };
    let (x, _) = data(&cfg);
    let (_, records) = train(&cfg.train_config(), &x, None).unwrap();
    let epochs: Vec<usize> = records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![0, 2, 4, 5]);
    for r in &records {
        assert!(r.representation_variance >= 0.0);
    }
}

#[test]
fn sweep_over_the_grid_has_one_row_per_epsilon() {
    let cfg = RunConfig {
        epochs: 1,
        eval_every: 1,
        ..small_config()
    };
    let (x, labels) = data(&cfg);
    let ev = Evaluator::new(&labels, cfg.probe_size).unwrap();
    let grid = [0.1, 0.3, 0.5, 0.7, 1.0];
    let rows = sweep_eps(&cfg.train_config(), &grid, &x, Some(&ev)).unwrap();
    assert_eq!(rows.len(), 5);
    for (row, eps) in rows.iter().zip(grid) {
        assert_eq!(row.epsilon, eps);
        assert!((0.0..=1.0).contains(&row.best_accuracy));
        assert_eq!(row.best_accuracy, best_accuracy(&row.records));
    }
    // before any training, harder negatives at smaller epsilon
    for w in rows.windows(2) {
        assert!(
            w[1].initial().mean_negative_similarity <= w[0].initial().mean_negative_similarity + 1e-12,
            "eps {} -> {}",
            w[0].epsilon,
            w[1].epsilon
        );
    }
    assert!(sweep_eps(&cfg.train_config(), &[], &x, None).is_err());
}

#[test]
fn huge_epsilon_matches_the_uniform_sampler() {
    let cfg = RunConfig {
        epochs: 3,
        eval_every: 1,
        ..small_config()
    };
    let (x, labels) = data(&cfg);
    let ev = Evaluator::new(&labels, cfg.probe_size).unwrap();
    let rows = sweep_eps(&cfg.train_config(), &[1e6], &x, Some(&ev)).unwrap();
    let uniform = RunConfig {
        sampler: SamplerName::Uniform,
        ..cfg.clone()
    };
    let (_, base) = train(&uniform.train_config(), &x, Some(&ev)).unwrap();
    for (a, b) in rows[0].records.iter().zip(&base) {
        assert!(
            (a.train_loss - b.train_loss).abs() < 1e-4,
            "{} vs {}",
            a.train_loss,
            b.train_loss
        );
        assert!((a.mean_negative_similarity - b.mean_negative_similarity).abs() < 1e-4);
        assert!((a.readout_accuracy - b.readout_accuracy).abs() <= 0.02);
    }
}

#[test]
fn sampled_negatives_and_every_loss_train() {
    use hardneg::config::{LossName, ModeName};
    for (loss, mode, m) in [
        (LossName::Triplet, ModeName::Sampled, 1),
        (LossName::Nce, ModeName::Sampled, 4),
        (LossName::LargeMNce, ModeName::Weighted, 16),
        (LossName::DebiasedNce, ModeName::Weighted, 16),
        (LossName::UpperBound, ModeName::Weighted, 16),
    ] {
        let cfg = RunConfig {
            loss,
            negative_mode: mode,
            m,
            epochs: 2,
            ..small_config()
        };
        let (x, labels) = data(&cfg);
        let ev = Evaluator::new(&labels, cfg.probe_size).unwrap();
        let (state, records) = train(&cfg.train_config(), &x, Some(&ev)).unwrap();
        assert_eq!(state.epoch, 2);
        for r in &records {
            assert!(r.train_loss.is_finite(), "{loss:?}");
            assert!((0.0..=1.0).contains(&r.readout_accuracy));
        }
    }
}

#[test]
fn triplet_needs_one_sampled_negative() {
    use hardneg::config::LossName;
    let cfg = RunConfig {
        loss: LossName::Triplet,
        ..small_config()
    };
    assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
}

#[test]
fn default_desk_run_improves_on_the_initial_readout() {
    // 10 classes, OT with eps = 0.5, 200 epochs; values pinned from the first verified run
    let cfg = RunConfig::default();
    let (x, labels) = common::data(&cfg);
    let ev = Evaluator::new(&labels, cfg.probe_size).unwrap();
    let (_, records) = train(&cfg.train_config(), &x, Some(&ev)).unwrap();
    let (first, last) = (&records[0], records.last().unwrap());
    assert_eq!(last.epoch, 200);
    assert!(last.readout_accuracy > first.readout_accuracy);
    assert!(
        (first.readout_accuracy - 0.746).abs() < 1e-9,
        "{}",
        first.readout_accuracy
    );
    assert!(
        (last.readout_accuracy - 0.832).abs() < 1e-9,
        "{}",
        last.readout_accuracy
    );
    assert!(
        (last.train_loss - 2.1379884889023857).abs() < 1e-9,
        "{}",
        last.train_loss
    );
    assert_eq!(last.sinkhorn_fallbacks, 0);
}
