//! Contrastive training on unlabeled inputs, with metrics taken on a fixed
//! probe set.

use hardneg_core::encoder::{adam_step, backward, forward};
use hardneg_core::objective::batch_loss;
use hardneg_core::ot::OtError;
use hardneg_core::sampler::{
    mean_negative_similarity, ot_negative_distribution, sample_negatives_with, tilt_negative_distribution,
    uniform_negative_distribution,
};
use hardneg_core::{
    AdamState, DistributionKind, EmbeddingBatch, EncoderParams, Matrix, NegativeDistribution, NegativeMode, Negatives,
    SamplerError, SinkhornConfig, TiltConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::readout::linear_readout;
use crate::synth::{augment, Labels};
use crate::HarnessError;

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub adam: AdamState,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub sinkhorn_fallbacks: u64,
}

impl TrainState {
    /// Fresh state: the run RNG is seeded from `cfg.seed` and first used to
    /// initialize the encoder.
    pub fn init(cfg: &TrainConfig, input_dim: usize) -> Result<Self, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = EncoderParams::init(&cfg.dims(input_dim), cfg.activation, &mut rng)?;
        let adam = AdamState::new(params.len());
        Ok(Self {
            params,
            adam,
            epoch: 0,
            rng,
            sinkhorn_fallbacks: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Objective on the probe set with fixed augmentations and expected
    /// (weighted) negatives.
    pub train_loss: f64,
    /// Mean of the per-step batch losses over the epoch; NaN at epoch 0.
    pub epoch_loss: f64,
    /// NaN without an evaluator.
    pub readout_accuracy: f64,
    /// Mean per-coordinate variance of the probe embeddings.
    pub representation_variance: f64,
    pub mean_negative_similarity: f64,
    /// Expected fraction of negatives sharing the anchor's label; NaN without an evaluator.
    pub same_class_rate: f64,
    pub sinkhorn_fallbacks: u64,
}

/// Holds the probe labels. Training never sees this type, so labels cannot
/// influence parameters.
#[derive(Clone, Debug)]
pub struct Evaluator {
    labels: Vec<usize>,
    num_classes: usize,
}

impl Evaluator {
    /// Labels of the first `probe_size` rows.
    pub fn new(labels: &Labels, probe_size: usize) -> Result<Self, HarnessError> {
        if probe_size > labels.labels.len() {
            return Err(HarnessError::Config("probe_size exceeds the number of labels".into()));
        }
        Ok(Self {
            labels: labels.labels[..probe_size].to_vec(),
            num_classes: labels.num_classes,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Conditional negative distribution for one batch of anchor embeddings.
/// A non-converged Sinkhorn solve falls back to the tilt with `beta = 1 / eps`
/// and bumps `fallbacks` when given.
pub fn negative_distribution(
    batch: &EmbeddingBatch,
    cfg: &TrainConfig,
    fallbacks: Option<&mut u64>,
) -> Result<NegativeDistribution, HarnessError> {
    match cfg.sampler {
        DistributionKind::Uniform => Ok(uniform_negative_distribution(batch)),
        DistributionKind::Tilt { beta } => Ok(tilt_negative_distribution(batch, &TiltConfig { beta })?),
        DistributionKind::EntropicOt { epsilon } => {
            let solver = SinkhornConfig {
                epsilon,
                ..cfg.sinkhorn
            };
            match ot_negative_distribution(batch, &solver) {
                Ok(d) => Ok(d),
                Err(SamplerError::Ot(OtError::NotConverged(partial))) => {
                    if let Some(count) = fallbacks {
                        *count += 1;
                        log::warn!(
                            "sinkhorn stopped at marginal error {:.3e} after {} iterations; using the tilt with beta = 1/eps",
                            partial.marginal_error,
                            partial.iterations_used
                        );
                    }
                    Ok(tilt_negative_distribution(batch, &TiltConfig { beta: 1.0 / epsilon })?)
                }
                Err(SamplerError::Ot(OtError::NumericalOverflow)) => Err(HarnessError::Numerical(format!(
                    "sinkhorn overflowed at epsilon = {epsilon}; epsilon is too small for the cost scale, increase it"
                ))),
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn select(inputs: &Matrix, rows: &[usize]) -> Matrix {
    inputs.select_rows(rows)
}

pub(crate) fn augment_rows<R: Rng + ?Sized>(x: &Matrix, noise_std: f64, rng: &mut R) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&augment(x.row(i), noise_std, rng));
    }
    out
}

/// One optimizer step on a batch; returns the batch loss before the update.
fn step(state: &mut TrainState, cfg: &TrainConfig, anchors: &Matrix, positives: &Matrix) -> Result<f64, HarnessError> {
    let (a, tape_a) = forward(&state.params, anchors)?;
    let (p, tape_p) = forward(&state.params, positives)?;
    let dist = negative_distribution(&a, cfg, Some(&mut state.sinkhorn_fallbacks))?;
    let out = match cfg.negative_mode {
        NegativeMode::Weighted => batch_loss(&a, &p, Negatives::Weighted(&dist), &cfg.loss)?,
        NegativeMode::Sampled { m } => {
            let idx = sample_negatives_with(&dist, m, &mut state.rng);
            batch_loss(&a, &p, Negatives::Indices(&idx), &cfg.loss)?
        }
    };
    if !out.value.is_finite() {
        return Err(HarnessError::Numerical("non-finite training loss".into()));
    }
    let mut grads = backward(&tape_a, &state.params, &out.d_anchors)?;
    let gp = backward(&tape_p, &state.params, &out.d_positives)?;
    grads.iter_mut().zip(&gp).for_each(|(g, h)| *g += h);
    adam_step(state.params.as_mut_slice(), &grads, &mut state.adam, &cfg.adam)?;
    Ok(out.value)
}

/// Runs one epoch: shuffle, drop the incomplete tail, one step per batch.
pub fn run_epoch(state: &mut TrainState, cfg: &TrainConfig, inputs: &Matrix) -> Result<f64, HarnessError> {
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    order.shuffle(&mut state.rng);
    let mut total = 0.0;
    let mut count = 0;
    for rows in order.chunks_exact(cfg.batch_size) {
        let anchors = select(inputs, rows);
        let positives = augment_rows(&anchors, cfg.augment_noise_std, &mut state.rng);
        total += step(state, cfg, &anchors, &positives)?;
        count += 1;
    }
    state.epoch += 1;
    Ok(if count > 0 { total / count as f64 } else { f64::NAN })
}

/// Seed of the probe augmentations, fixed so probe losses are comparable
/// across epochs.
const PROBE_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Mean per-coordinate (population) variance of the rows of `x`.
pub fn representation_variance(x: &Matrix) -> f64 {
    let n = x.rows() as f64;
    let d = x.cols();
    let mut total = 0.0;
    for c in 0..d {
        let mean = (0..x.rows()).map(|i| x[(i, c)]).sum::<f64>() / n;
        total += (0..x.rows()).map(|i| (x[(i, c)] - mean).powi(2)).sum::<f64>() / n;
    }
    total / d as f64
}

/// Probe metrics at the current parameters. Uses its own RNG, so calling it
/// does not perturb training.
pub fn evaluate(
    state: &TrainState,
    cfg: &TrainConfig,
    inputs: &Matrix,
    evaluator: Option<&Evaluator>,
    epoch_loss: f64,
) -> Result<MetricsRecord, HarnessError> {
    let probe_rows: Vec<usize> = (0..cfg.probe_size.min(inputs.rows())).collect();
    if evaluator.is_some_and(|ev| ev.labels.len() < probe_rows.len()) {
        return Err(HarnessError::Config(
            "evaluator holds fewer labels than the probe set".into(),
        ));
    }
    let probe = select(inputs, &probe_rows);
    let (emb, _) = forward(&state.params, &probe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let positives = augment_rows(&probe, cfg.augment_noise_std, &mut rng);
    let (pos_emb, _) = forward(&state.params, &positives)?;

    let mut loss = 0.0;
    let mut neg_sim = 0.0;
    let mut same = 0.0;
    let mut batches = 0;
    for rows in probe_rows.chunks_exact(cfg.batch_size) {
        let a = EmbeddingBatch::new(emb.vectors().select_rows(rows))?;
        let p = EmbeddingBatch::new(pos_emb.vectors().select_rows(rows))?;
        let dist = negative_distribution(&a, cfg, None)?;
        let out = match cfg.negative_mode {
            NegativeMode::Sampled { m: 1 } if cfg.loss.kind == hardneg_core::LossKind::Triplet => {
                // one expected negative is not defined for the hinge: use the
                // most probable one
                let idx: Vec<Vec<usize>> = (0..a.len()).map(|i| vec![argmax(dist.row(i))]).collect();
                batch_loss(&a, &p, Negatives::Indices(&idx), &cfg.loss)?
            }
            _ => batch_loss(&a, &p, Negatives::Weighted(&dist), &cfg.loss)?,
        };
        loss += out.value;
        neg_sim += mean_negative_similarity(&a, &dist)?;
        if let Some(ev) = evaluator {
            let labels: Vec<usize> = rows.iter().map(|&r| ev.labels[r]).collect();
            same += same_class_rate(&dist, &labels);
        }
        batches += 1;
    }
    let batches = batches as f64;
    let (readout_accuracy, same_class_rate) = match evaluator {
        Some(ev) => {
            let r = linear_readout(
                emb.vectors(),
                &ev.labels[..probe_rows.len()],
                ev.num_classes,
                &cfg.readout,
            )
            .map_err(|e| HarnessError::Config(e.to_string()))?;
            (r.accuracy, same / batches)
        }
        None => (f64::NAN, f64::NAN),
    };
    Ok(MetricsRecord {
        epoch: state.epoch,
        train_loss: loss / batches,
        epoch_loss,
        readout_accuracy,
        representation_variance: representation_variance(emb.vectors()),
        mean_negative_similarity: neg_sim / batches,
        same_class_rate,
        sinkhorn_fallbacks: state.sinkhorn_fallbacks,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = j;
        }
    }
    best
}

/// `(1/n) sum_i sum_j P(j|i) [y_i = y_j]`.
pub fn same_class_rate(dist: &NegativeDistribution, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        total += (0..n)
            .filter(|&j| labels[j] == labels[i])
            .map(|j| dist.row(i)[j])
            .sum::<f64>();
    }
    total / n as f64
}

/// Trains from a fresh state for `cfg.epochs` epochs.
pub fn train(
    cfg: &TrainConfig,
    inputs: &Matrix,
    evaluator: Option<&Evaluator>,
) -> Result<(TrainState, Vec<MetricsRecord>), HarnessError> {
    cfg.validate()?;
    let state = TrainState::init(cfg, inputs.cols())?;
    train_from(state, cfg, inputs, evaluator)
}

/// Continues `state` up to `cfg.epochs`. Metrics are recorded at the start
/// (when `state.epoch == 0`), every `eval_every` epochs and at the end.
pub fn train_from(
    mut state: TrainState,
    cfg: &TrainConfig,
    inputs: &Matrix,
    evaluator: Option<&Evaluator>,
) -> Result<(TrainState, Vec<MetricsRecord>), HarnessError> {
    cfg.validate()?;
    if inputs.rows() < 2 * cfg.batch_size {
        return Err(HarnessError::Config(format!(
            "{} inputs cannot fill two batches of {}",
            inputs.rows(),
            cfg.batch_size
        )));
    }
    if inputs.rows() < cfg.probe_size {
        return Err(HarnessError::Config("probe_size exceeds the number of inputs".into()));
    }
    let mut records = Vec::new();
    if state.epoch == 0 {
        records.push(evaluate(&state, cfg, inputs, evaluator, f64::NAN)?);
    }
    while state.epoch < cfg.epochs {
        let epoch_loss = run_epoch(&mut state, cfg, inputs)?;
        if state.epoch.is_multiple_of(cfg.eval_every) || state.epoch == cfg.epochs {
            records.push(evaluate(&state, cfg, inputs, evaluator, epoch_loss)?);
        }
    }
    Ok((state, records))
}

/// Best readout accuracy over a run's records (ignoring NaN).
pub fn best_accuracy(records: &[MetricsRecord]) -> f64 {
    records
        .iter()
        .map(|r| r.readout_accuracy)
        .filter(|a| !a.is_nan())
        .fold(f64::NAN, f64::max)
}

/// One training run per `epsilon` with a shared seed and dataset.
pub fn sweep_eps(
    cfg: &TrainConfig,
    grid: &[f64],
    inputs: &Matrix,
    evaluator: Option<&Evaluator>,
) -> Result<Vec<SweepRow>, HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::Config("epsilon grid is empty".into()));
    }
    grid.iter()
        .map(|&epsilon| {
            let run = TrainConfig {
                sampler: DistributionKind::EntropicOt { epsilon },
                ..cfg.clone()
            };
            let (_, records) = train(&run, inputs, evaluator)?;
            Ok(SweepRow {
                epsilon,
                best_accuracy: best_accuracy(&records),
                records,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub best_accuracy: f64,
    pub records: Vec<MetricsRecord>,
}

impl SweepRow {
    pub fn initial(&self) -> &MetricsRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("a run records at least one row")
    }
}
