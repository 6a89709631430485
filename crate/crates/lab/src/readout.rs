//! Linear readout: multinomial logistic regression on frozen embeddings,
//! scored by k-fold cross-validation.

use hardneg_core::Matrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReadoutError {
    #[error("readout needs one label per embedding row ({rows} rows, {labels} labels)")]
    LabelCount { rows: usize, labels: usize },
    #[error("readout needs at least {folds} samples and 2 classes")]
    TooSmall { folds: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReadoutConfig {
    pub folds: usize,
    /// L2 penalty on the weights (not the intercepts).
    pub l2: f64,
    pub iterations: usize,
    /// Seeds the fold assignment only.
    pub seed: u64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            l2: 1e-3,
            iterations: 300,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    /// Mean held-out accuracy over folds.
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    /// All embeddings coincide; `accuracy` is the chance level `1 / k`.
    pub degenerate: bool,
}

/// Features closer than this in every coordinate count as one point.
const DEGENERATE_TOL: f64 = 1e-12;

pub fn linear_readout(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    cfg: &ReadoutConfig,
) -> Result<Readout, ReadoutError> {
    let n = features.rows();
    if labels.len() != n {
        return Err(ReadoutError::LabelCount {
            rows: n,
            labels: labels.len(),
        });
    }
    if n < cfg.folds || cfg.folds < 2 || num_classes < 2 {
        return Err(ReadoutError::TooSmall { folds: cfg.folds });
    }
    let first = features.row(0);
    if features
        .row_iter()
        .all(|r| r.iter().zip(first).all(|(a, b)| (a - b).abs() <= DEGENERATE_TOL))
    {
        let chance = 1.0 / num_classes as f64;
        return Ok(Readout {
            accuracy: chance,
            fold_accuracies: vec![chance; cfg.folds],
            degenerate: true,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % cfg.folds;
    }
    let mut fold_accuracies = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == fold);
        let model = fit(features, labels, &train, num_classes, cfg);
        let correct = test
            .iter()
            .filter(|&&i| model.predict(features.row(i)) == labels[i])
            .count();
        fold_accuracies.push(correct as f64 / test.len() as f64);
    }
    let accuracy = fold_accuracies.iter().sum::<f64>() / cfg.folds as f64;
    Ok(Readout {
        accuracy,
        fold_accuracies,
        degenerate: false,
    })
}

struct Model {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `k x (d + 1)`, intercept last.
    weights: Matrix,
}

impl Model {
    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        for (k, o) in out.iter_mut().enumerate() {
            let w = self.weights.row(k);
            let mut s = w[d];
            for c in 0..d {
                s += w[c] * (x[c] - self.mean[c]) / self.scale[c];
            }
            *o = s;
        }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.weights.rows()];
        self.logits(x, &mut z);
        // first maximum wins ties
        let mut best = 0;
        for k in 1..z.len() {
            if z[k] > z[best] {
                best = k;
            }
        }
        best
    }
}

/// Full-batch Nesterov gradient descent on the regularized cross-entropy of
/// standardized features. The step is `1 / L` for the usual bound
/// `L = max ‖x‖² / 2 + l2`.
fn fit(features: &Matrix, labels: &[usize], rows: &[usize], k: usize, cfg: &ReadoutConfig) -> Model {
    let d = features.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in rows {
        for c in 0..d {
            mean[c] += features[(i, c)] / n;
        }
    }
    let mut scale = vec![0.0; d];
    for &i in rows {
        for c in 0..d {
            scale[c] += (features[(i, c)] - mean[c]).powi(2) / n;
        }
    }
    scale.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = (0..d).map(|c| (features[(i, c)] - mean[c]) / scale[c]).collect();
            v.push(1.0);
            v
        })
        .collect();
    let max_sq = x
        .iter()
        .map(|v| v.iter().map(|a| a * a).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / (0.5 * max_sq + cfg.l2);

    let cols = d + 1;
    let mut w = vec![0.0; k * cols];
    let mut lookahead = w.clone();
    let mut prev = w.clone();
    let mut grad = vec![0.0; k * cols];
    let mut z = vec![0.0; k];
    for it in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (xi, &yi) in x.iter().zip(rows.iter().map(|&i| &labels[i])) {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = lookahead[c * cols..(c + 1) * cols]
                    .iter()
                    .zip(xi)
                    .map(|(a, b)| a * b)
                    .sum();
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
            for c in 0..k {
                let p = (z[c] - max).exp() / total - if c == yi { 1.0 } else { 0.0 };
                for (g, a) in grad[c * cols..(c + 1) * cols].iter_mut().zip(xi) {
                    *g += p * a / n;
                }
            }
        }
        for c in 0..k {
            for j in 0..d {
                grad[c * cols + j] += cfg.l2 * lookahead[c * cols + j];
            }
        }
        let momentum = it as f64 / (it as f64 + 3.0);
        for j in 0..w.len() {
            let next = lookahead[j] - step * grad[j];
            prev[j] = w[j];
            w[j] = next;
            lookahead[j] = next + momentum * (next - prev[j]);
        }
    }
    Model {
        mean,
        scale,
        weights: Matrix::from_vec(k, cols, w).expect("shape"),
    }
}
