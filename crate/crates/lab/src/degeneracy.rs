//! Training against the unregularized in-batch adversary: every anchor's
//! negative is its most similar batch member, itself included. Without the
//! self-exclusion and the entropic penalty the optimum is a constant map.

use hardneg_core::encoder::{adam_step, backward, forward};
use hardneg_core::objective::batch_loss;
use hardneg_core::{EmbeddingBatch, LossConfig, LossKind, Matrix, Negatives};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::train::{augment_rows, representation_variance, TrainState};
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyConfig {
    /// Encoder, optimizer, batch size, seed and loss. The sampler and the
    /// negative mode are ignored.
    pub train: TrainConfig,
    pub max_epochs: usize,
    /// Stop once the probe variance is below this and the loss is within
    /// `gap_target` of its value at a constant map.
    pub variance_target: f64,
    pub gap_target: f64,
    pub stop_when_collapsed: bool,
}

impl DegeneracyConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            max_epochs: 500,
            variance_target: 1e-3,
            gap_target: 1e-2,
            stop_when_collapsed: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyPoint {
    pub epoch: usize,
    pub representation_variance: f64,
    /// Loss on the probe set under the adversarial negatives.
    pub loss: f64,
    /// `|loss - psi(0, .., 0)|`.
    pub gap: f64,
    /// Upper-bound loss `E[f(x).f(x-) - f(x).f(x+)]` under the same negatives.
    pub upper_bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyReport {
    pub loss: LossConfig,
    /// Value of the loss at a constant representation.
    pub collapse_value: f64,
    pub trajectory: Vec<DegeneracyPoint>,
    pub collapsed: bool,
}

impl DegeneracyReport {
    pub fn last(&self) -> &DegeneracyPoint {
        self.trajectory.last().expect("the trajectory starts at epoch 0")
    }
}

/// Index of the most similar batch member for each row, the row itself
/// included; ties go to the lowest index.
pub fn max_similarity_negatives(batch: &EmbeddingBatch) -> Vec<Vec<usize>> {
    let sims = batch.similarities();
    (0..batch.len())
        .map(|i| {
            let row = sims.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            vec![best]
        })
        .collect()
}

const PROBE_SEED: u64 = 0xdead_beef;

fn probe_point(
    state: &TrainState,
    cfg: &DegeneracyConfig,
    probe: &Matrix,
    probe_pos: &Matrix,
    collapse_value: f64,
) -> Result<DegeneracyPoint, HarnessError> {
    let t = &cfg.train;
    let (a, _) = forward(&state.params, probe)?;
    let (p, _) = forward(&state.params, probe_pos)?;
    let rows: Vec<usize> = (0..probe.rows()).collect();
    let (mut loss, mut upper, mut batches) = (0.0, 0.0, 0.0);
    for chunk in rows.chunks_exact(t.batch_size) {
        let ab = EmbeddingBatch::new(a.vectors().select_rows(chunk))?;
        let pb = EmbeddingBatch::new(p.vectors().select_rows(chunk))?;
        let idx = max_similarity_negatives(&ab);
        loss += batch_loss(&ab, &pb, Negatives::Indices(&idx), &t.loss)?.value;
        upper += batch_loss(
            &ab,
            &pb,
            Negatives::Indices(&idx),
            &LossConfig::of(LossKind::UpperBound),
        )?
        .value;
        batches += 1.0;
    }
    let loss = loss / batches;
    Ok(DegeneracyPoint {
        epoch: state.epoch,
        representation_variance: representation_variance(a.vectors()),
        loss,
        gap: (loss - collapse_value).abs(),
        upper_bound: upper / batches,
    })
}

pub fn demo_degeneracy(cfg: &DegeneracyConfig, inputs: &Matrix) -> Result<DegeneracyReport, HarnessError> {
    let t = &cfg.train;
    t.loss.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    if cfg.max_epochs < 1 || t.batch_size < 2 || inputs.rows() < t.batch_size {
        return Err(HarnessError::Config(
            "degeneracy demo needs max_epochs >= 1 and one full batch".into(),
        ));
    }
    let mut state = TrainState::init(t, inputs.cols())?;
    let probe_rows: Vec<usize> = (0..t.probe_size.min(inputs.rows()).max(t.batch_size)).collect();
    let probe = inputs.select_rows(&probe_rows);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let probe_pos = augment_rows(&probe, t.augment_noise_std, &mut probe_rng);
    let collapse_value = t.loss.value_at_zero();

    let mut trajectory = vec![probe_point(&state, cfg, &probe, &probe_pos, collapse_value)?];
    let done = |p: &DegeneracyPoint| p.representation_variance < cfg.variance_target && p.gap < cfg.gap_target;
    while state.epoch < cfg.max_epochs {
        if cfg.stop_when_collapsed && done(trajectory.last().expect("non-empty")) {
            break;
        }
        let mut order: Vec<usize> = (0..inputs.rows()).collect();
        order.shuffle(&mut state.rng);
        for rows in order.chunks_exact(t.batch_size) {
            let anchors = inputs.select_rows(rows);
            let positives = augment_rows(&anchors, t.augment_noise_std, &mut state.rng);
            let (a, tape_a) = forward(&state.params, &anchors)?;
            let (p, tape_p) = forward(&state.params, &positives)?;
            let idx = max_similarity_negatives(&a);
            let out = batch_loss(&a, &p, Negatives::Indices(&idx), &t.loss)?;
            let mut grads = backward(&tape_a, &state.params, &out.d_anchors)?;
            let gp = backward(&tape_p, &state.params, &out.d_positives)?;
            grads.iter_mut().zip(&gp).for_each(|(g, h)| *g += h);
            adam_step(state.params.as_mut_slice(), &grads, &mut state.adam, &t.adam)?;
        }
        state.epoch += 1;
        trajectory.push(probe_point(&state, cfg, &probe, &probe_pos, collapse_value)?);
    }
    let collapsed = done(trajectory.last().expect("non-empty"));
    Ok(DegeneracyReport {
        loss: t.loss,
        collapse_value,
        trajectory,
        collapsed,
    })
}

/// Fraction of consecutive `window`-epoch blocks, after the first `burn_in` epochs, whose
/// mean variance does not exceed the previous block's.
pub fn variance_window_monotonicity(report: &DegeneracyReport, window: usize, burn_in: usize) -> f64 {
    let v: Vec<f64> = report
        .trajectory
        .iter()
        .filter(|p| p.epoch >= burn_in)
        .map(|p| p.representation_variance)
        .collect();
    let means: Vec<f64> = v
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect();
    if means.len() < 2 {
        return 1.0;
    }
    let ok = means.windows(2).filter(|w| w[1] <= w[0]).count();
    ok as f64 / (means.len() - 1) as f64
}
