mod common;

use common::{assert_same_records, data, small_config};
use hardneg::core::Matrix;
use hardneg::io::{
    load_checkpoint, read_cost, read_dataset, read_metrics, save_checkpoint, write_dataset, write_metrics, write_plan,
};
use hardneg::synth::generate;
use hardneg::train::{train, Evaluator};
use hardneg::{HarnessError, RunConfig};

#[test]
fn metrics_round_trip_bit_exact() {
    let cfg = small_config();
    let (x, labels) = data(&cfg);
    let ev = Evaluator::new(&labels, cfg.probe_size).unwrap();
    let (_, records) = train(&cfg.train_config(), &x, Some(&ev)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics(&path, &cfg, &records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# hardneg metrics v1\n# config: {"));
    let (back_cfg, back) = read_metrics(&path).unwrap();
    assert_eq!(back_cfg, cfg);
    assert_same_records(&back, &records);
}

#[test]
fn metrics_with_a_foreign_header_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    std::fs::write(&path, "epoch,loss\n0,1\n").unwrap();
    assert!(matches!(read_metrics(&path), Err(HarnessError::Format(_))));
}

#[test]
fn checkpoint_round_trip_bit_exact() {
    let cfg = small_config();
    let (x, _) = data(&cfg);
    let (state, _) = train(&cfg.train_config(), &x, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &state, &cfg).unwrap();
    let (back, back_cfg) = load_checkpoint(&path).unwrap();
    assert_eq!(back_cfg, cfg);
    assert_eq!(back.params.as_slice().len(), state.params.as_slice().len());
    for (a, b) in back.params.as_slice().iter().zip(state.params.as_slice()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(back, state);

    let path2 = dir.path().join("ck2.json");
    save_checkpoint(&path2, &back, &cfg).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn tampered_checkpoint_fails_the_checksum() {
    let cfg = small_config();
    let (x, _) = data(&cfg);
    let (state, _) = train(
        &RunConfig {
            epochs: 1,
            ..cfg.clone()
        }
        .train_config(),
        &x,
        None,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &state, &cfg).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("\"epoch\": 1", "\"epoch\": 2", 1);
    assert_ne!(text, tampered);
    std::fs::write(&path, tampered).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
}

#[test]
fn dataset_round_trip() {
    let cfg = RunConfig {
        samples_per_class: 7,
        ..RunConfig::default()
    };
    let ds = generate(&cfg.synth_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_dataset(&path, &ds).unwrap();
    let (x, y) = read_dataset(&path).unwrap();
    assert_eq!(&x, ds.inputs());
    assert_eq!(y, ds.labels());
    let header = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(header.starts_with("x0,x1,") && header.ends_with(",x15,label"));
}

#[test]
fn cost_file_marks_inf_as_forbidden() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    std::fs::write(&path, "# diagonal forbidden\ninf,1.5\n2,inf\n").unwrap();
    let c = read_cost(&path).unwrap();
    assert_eq!(c.shape(), (2, 2));
    assert!(c.is_forbidden(0, 0) && c.is_forbidden(1, 1));
    assert!(!c.is_forbidden(0, 1));
    assert_eq!(c.costs()[(0, 1)], 1.5);
    assert_eq!(c.costs()[(1, 0)], 2.0);

    std::fs::write(&path, "1,2\n3\n").unwrap();
    assert!(read_cost(&path).is_err());
    std::fs::write(&path, "1,x\n").unwrap();
    assert!(read_cost(&path).is_err());
}

#[test]
fn plan_has_twelve_significant_digits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    let plan = Matrix::from_rows(&[vec![1.0 / 3.0, 0.0], vec![2.0e-7, 0.125]]).unwrap();
    write_plan(&path, &plan).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "3.33333333333e-1,0.00000000000e0\n2.00000000000e-7,1.25000000000e-1\n"
    );
}

#[test]
fn run_dirs_are_unique_and_named_by_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let a = hardneg::io::create_run_dir(dir.path(), &cfg).unwrap();
    let b = hardneg::io::create_run_dir(dir.path(), &cfg).unwrap();
    assert_ne!(a, b);
    let name = a.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with("run-") && name.contains(&cfg.hash8()), "{name}");
}
