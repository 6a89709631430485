//! File formats: metrics and dataset CSV, cost and plan CSV for the solver,
//! JSON checkpoints, and run directories.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a file
//! back yields the exact bits that were written.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use hardneg_core::{AdamState, EncoderParams, MaskedCost, Matrix};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ActivationName, RunConfig};
use crate::synth::LabeledDataset;
use crate::train::{MetricsRecord, TrainState};
use crate::HarnessError;

pub(crate) fn csv_error(e: csv::Error) -> HarnessError {
    HarnessError::Format(format!("csv: {e}"))
}

fn parse_f64(field: &str, what: &str) -> Result<f64, HarnessError> {
    field
        .trim()
        .parse()
        .map_err(|_| HarnessError::Format(format!("{what}: cannot parse {field:?} as a number")))
}

fn parse_usize(field: &str, what: &str) -> Result<usize, HarnessError> {
    field
        .trim()
        .parse()
        .map_err(|_| HarnessError::Format(format!("{what}: cannot parse {field:?} as an integer")))
}

pub const METRICS_VERSION: u32 = 1;
const METRICS_COLUMNS: [&str; 8] = [
    "epoch",
    "train_loss",
    "epoch_loss",
    "readout_accuracy",
    "representation_variance",
    "mean_negative_similarity",
    "same_class_rate",
    "sinkhorn_fallbacks",
];

/// Metrics CSV: two comment lines (format version, then the full config as
/// one JSON line) followed by a header row and one row per record.
pub fn write_metrics(path: &Path, cfg: &RunConfig, records: &[MetricsRecord]) -> Result<(), HarnessError> {
    let mut out = Vec::new();
    writeln!(out, "# hardneg metrics v{METRICS_VERSION}")?;
    writeln!(out, "# config: {}", cfg.to_json())?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(METRICS_COLUMNS).map_err(csv_error)?;
        for r in records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.train_loss),
                format!("{:?}", r.epoch_loss),
                format!("{:?}", r.readout_accuracy),
                format!("{:?}", r.representation_variance),
                format!("{:?}", r.mean_negative_similarity),
                format!("{:?}", r.same_class_rate),
                r.sinkhorn_fallbacks.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<(RunConfig, Vec<MetricsRecord>), HarnessError> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut lines = file.lines();
    let version = lines.next().transpose()?.unwrap_or_default();
    if version.trim() != format!("# hardneg metrics v{METRICS_VERSION}") {
        return Err(HarnessError::Format(format!("unsupported metrics header {version:?}")));
    }
    let config_line = lines.next().transpose()?.unwrap_or_default();
    let json = config_line
        .strip_prefix("# config: ")
        .ok_or_else(|| HarnessError::Format("metrics file lacks the config line".into()))?;
    let cfg = RunConfig::from_json(json)?;
    let body: String = lines.collect::<Result<Vec<_>, _>>()?.join("\n");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.iter().ne(METRICS_COLUMNS) {
        return Err(HarnessError::Format("unexpected metrics columns".into()));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        records.push(MetricsRecord {
            epoch: parse_usize(&row[0], "epoch")?,
            train_loss: parse_f64(&row[1], "train_loss")?,
            epoch_loss: parse_f64(&row[2], "epoch_loss")?,
            readout_accuracy: parse_f64(&row[3], "readout_accuracy")?,
            representation_variance: parse_f64(&row[4], "representation_variance")?,
            mean_negative_similarity: parse_f64(&row[5], "mean_negative_similarity")?,
            same_class_rate: parse_f64(&row[6], "same_class_rate")?,
            sinkhorn_fallbacks: parse_usize(&row[7], "sinkhorn_fallbacks")? as u64,
        });
    }
    Ok((cfg, records))
}

/// Header `x0,..,x{D-1},label`, one row per point.
pub fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let d = ds.inputs().cols();
    let mut header: Vec<String> = (0..d).map(|c| format!("x{c}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_error)?;
    for (row, y) in ds.inputs().row_iter().zip(ds.labels()) {
        let mut rec: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Inputs and labels of a dataset CSV.
pub fn read_dataset(path: &Path) -> Result<(Matrix, Vec<usize>), HarnessError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_error)?;
    let header = rdr.headers().map_err(csv_error)?.clone();
    let d = header
        .len()
        .checked_sub(1)
        .filter(|&d| d > 0)
        .ok_or_else(|| HarnessError::Format("dataset has no input columns".into()))?;
    if &header[d] != "label" || (0..d).any(|c| header[c] != format!("x{c}")) {
        return Err(HarnessError::Format("dataset header must be x0,..,x{D-1},label".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        for c in 0..d {
            data.push(parse_f64(&row[c], "dataset")?);
        }
        labels.push(parse_usize(&row[d], "label")?);
    }
    let m = Matrix::from_vec(labels.len(), d, data).ok_or_else(|| HarnessError::Format("ragged dataset".into()))?;
    Ok((m, labels))
}

/// Square or rectangular cost matrix without header; `inf` marks a forbidden entry.
pub fn read_cost(path: &Path) -> Result<MaskedCost, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_error)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        rows.push(row.iter().map(|f| parse_f64(f, "cost")).collect::<Result<_, _>>()?);
    }
    let costs = Matrix::from_rows(&rows)
        .ok_or_else(|| HarnessError::Format("cost rows differ in length or are empty".into()))?;
    let forbidden: Vec<bool> = costs.as_slice().iter().map(|c| *c == f64::INFINITY).collect();
    let mut clean = costs;
    clean.as_mut_slice().iter_mut().for_each(|c| {
        if *c == f64::INFINITY {
            *c = 0.0;
        }
    });
    MaskedCost::new(clean, forbidden).map_err(|e| HarnessError::Config(e.to_string()))
}

/// Plan rows with 12 significant digits.
pub fn write_plan(path: &Path, plan: &Matrix) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_error)?;
    for row in plan.row_iter() {
        w.write_record(row.iter().map(|p| format!("{p:.11e}")))
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "hardneg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Architecture {
    dims: Vec<usize>,
    activation: ActivationName,
    /// Per layer: weights `out x in` row-major, then `out` biases.
    layout: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamMoments {
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    /// 32-byte ChaCha key, hex.
    seed: String,
    stream: u64,
    /// Position in 32-bit words, decimal (it is a 128-bit counter).
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Payload {
    format: String,
    version: u32,
    architecture: Architecture,
    params: Vec<f64>,
    adam: AdamMoments,
    epoch: usize,
    rng: RngState,
    sinkhorn_fallbacks: u64,
    config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    payload: Payload,
    /// SHA-256 of the compact JSON encoding of `payload`, hex.
    checksum: String,
}

fn activation_name(a: hardneg_core::Activation) -> ActivationName {
    match a {
        hardneg_core::Activation::Identity => ActivationName::Identity,
        hardneg_core::Activation::Tanh => ActivationName::Tanh,
        hardneg_core::Activation::SmoothRelu => ActivationName::SmoothRelu,
    }
}

pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &RunConfig) -> Result<(), HarnessError> {
    let all_finite = state
        .params
        .as_slice()
        .iter()
        .chain(&state.adam.first_moment)
        .chain(&state.adam.second_moment)
        .all(|x| x.is_finite());
    if !all_finite {
        return Err(HarnessError::Numerical(
            "refusing to checkpoint non-finite parameters".into(),
        ));
    }
    let payload = Payload {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        architecture: Architecture {
            dims: state.params.dims().to_vec(),
            activation: activation_name(state.params.activation()),
            layout: "per layer: weights out x in row-major, then biases".into(),
        },
        params: state.params.as_slice().to_vec(),
        adam: AdamMoments {
            step: state.adam.step,
            first_moment: state.adam.first_moment.clone(),
            second_moment: state.adam.second_moment.clone(),
        },
        epoch: state.epoch,
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        sinkhorn_fallbacks: state.sinkhorn_fallbacks,
        config: cfg.clone(),
    };
    let checksum = hex::encode(Sha256::digest(
        serde_json::to_vec(&payload).expect("payload serializes"),
    ));
    let text = serde_json::to_string_pretty(&CheckpointFile { payload, checksum }).expect("checkpoint serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, RunConfig), HarnessError> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| HarnessError::Format(format!("checkpoint: {e}")))?;
    let p = file.payload;
    let checksum = hex::encode(Sha256::digest(serde_json::to_vec(&p).expect("payload serializes")));
    if checksum != file.checksum {
        return Err(HarnessError::Format("checkpoint checksum mismatch".into()));
    }
    if p.format != CHECKPOINT_FORMAT || p.version != CHECKPOINT_VERSION {
        return Err(HarnessError::Format(format!(
            "unsupported checkpoint {} v{}",
            p.format, p.version
        )));
    }
    let params = EncoderParams::from_flat(&p.architecture.dims, p.architecture.activation.into(), p.params)
        .map_err(|e| HarnessError::Format(format!("checkpoint: {e}")))?;
    if p.adam.first_moment.len() != params.len() || p.adam.second_moment.len() != params.len() {
        return Err(HarnessError::Format(
            "checkpoint: optimizer moments do not match the parameters".into(),
        ));
    }
    let seed: [u8; 32] = hex::decode(&p.rng.seed)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| HarnessError::Format("checkpoint: rng seed must be 32 bytes of hex".into()))?;
    let word_pos: u128 = p
        .rng
        .word_pos
        .parse()
        .map_err(|_| HarnessError::Format("checkpoint: bad rng word position".into()))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(p.rng.stream);
    rng.set_word_pos(word_pos);
    let adam = AdamState {
        first_moment: p.adam.first_moment,
        second_moment: p.adam.second_moment,
        step: p.adam.step,
    };
    let state = TrainState {
        params,
        adam,
        epoch: p.epoch,
        rng,
        sinkhorn_fallbacks: p.sinkhorn_fallbacks,
    };
    Ok((state, p.config))
}

/// Creates `<base>/run-<unix seconds>-<config hash>`, adding a numeric
/// suffix if that name is taken.
pub fn create_run_dir(base: &Path, cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    create_named_run_dir(base, &cfg.hash8())
}

/// First 8 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..8].to_string()
}

/// Like [`create_run_dir`] with an explicit hash.
pub fn create_named_run_dir(base: &Path, hash: &str) -> Result<PathBuf, HarnessError> {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let stem = format!("run-{ts}-{hash}");
    fs::create_dir_all(base)?;
    let mut dir = base.join(&stem);
    let mut k = 1;
    while dir.exists() {
        dir = base.join(format!("{stem}-{k}"));
        k += 1;
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.toml";
