//! Gaussian-mixture data with latent classes and augmentation pairs.
//!
//! Labels live on [`LabeledDataset`] only. Training code takes the bare input
//! matrix; labels reach the evaluator through [`LabeledDataset::into_parts`].

use hardneg_core::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("dataset has {rows} rows, index {index} is out of range")]
    IndexOutOfRange { index: usize, rows: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub ambient_dim: usize,
    pub samples_per_class: usize,
    /// Radius of the sphere the class centers are drawn on.
    pub class_center_spread: f64,
    pub within_class_std: f64,
    pub augment_noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            ambient_dim: 16,
            samples_per_class: 500,
            class_center_spread: 3.0,
            within_class_std: 1.0,
            augment_noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// `batch_size` adds the requirement of at least two full batches.
    pub fn validate(&self, batch_size: Option<usize>) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.ambient_dim == 0 || self.samples_per_class == 0 {
            return bad("ambient_dim and samples_per_class must be positive");
        }
        for (name, v) in [
            ("class_center_spread", self.class_center_spread),
            ("within_class_std", self.within_class_std),
            ("augment_noise_std", self.augment_noise_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if let Some(b) = batch_size {
            if self.num_classes * self.samples_per_class < 2 * b {
                return bad("num_classes * samples_per_class must be at least twice the batch size");
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Matrix,
    labels: Vec<usize>,
    centers: Matrix,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, centers: Matrix) -> Result<Self, SynthError> {
        let num_classes = centers.rows();
        if labels.len() != inputs.rows() || centers.cols() != inputs.cols() {
            return Err(SynthError::InvalidConfig(
                "inputs, labels and centers disagree in shape".into(),
            ));
        }
        if labels.iter().any(|&y| y >= num_classes) {
            return Err(SynthError::InvalidConfig("label out of range".into()));
        }
        if inputs.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(SynthError::InvalidConfig("inputs must be finite".into()));
        }
        Ok(Self {
            inputs,
            labels,
            centers,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Splits off the labels so the inputs can be handed to training alone.
    pub fn into_parts(self) -> (Matrix, Labels) {
        (
            self.inputs,
            Labels {
                labels: self.labels,
                num_classes: self.num_classes,
            },
        )
    }
}

/// Ground-truth labels, held by evaluation code only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Class centers uniform on a sphere of radius `class_center_spread`; points
/// are center plus isotropic Gaussian noise. Rows are shuffled so that any
/// prefix mixes classes.
pub fn generate(cfg: &SynthConfig) -> Result<LabeledDataset, SynthError> {
    cfg.validate(None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.ambient_dim;
    let mut centers = Matrix::zeros(cfg.num_classes, d);
    for k in 0..cfg.num_classes {
        let row = centers.row_mut(k);
        loop {
            row.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
            let norm = hardneg_core::matrix::norm(row);
            if norm > 1e-12 {
                row.iter_mut().for_each(|x| *x *= cfg.class_center_spread / norm);
                break;
            }
        }
    }
    let mut labels: Vec<usize> = (0..cfg.num_classes)
        .flat_map(|k| std::iter::repeat_n(k, cfg.samples_per_class))
        .collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, cfg.within_class_std).expect("validated std");
    let mut inputs = Matrix::zeros(labels.len(), d);
    for (i, &y) in labels.iter().enumerate() {
        for c in 0..d {
            inputs[(i, c)] = centers[(y, c)] + noise.sample(&mut rng);
        }
    }
    LabeledDataset::new(inputs, labels, centers)
}

/// Anchor row `index` and a positive that adds `N(0, noise_std²)` per coordinate.
pub fn make_pair<R: Rng + ?Sized>(
    inputs: &Matrix,
    index: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>), SynthError> {
    if index >= inputs.rows() {
        return Err(SynthError::IndexOutOfRange {
            index,
            rows: inputs.rows(),
        });
    }
    let anchor = inputs.row(index).to_vec();
    let positive = augment(&anchor, noise_std, rng);
    Ok((anchor, positive))
}

pub(crate) fn augment<R: Rng + ?Sized>(x: &[f64], noise_std: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + noise_std * z
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_classes: 3,
            ambient_dim: 4,
            samples_per_class: 20,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_std_puts_points_on_centers() {
        let cfg = SynthConfig {
            within_class_std: 0.0,
            ..small(1)
        };
        let ds = generate(&cfg).unwrap();
        for (i, &y) in ds.labels().iter().enumerate() {
            assert_eq!(ds.inputs().row(i), ds.centers().row(y));
        }
    }

    #[test]
    fn centers_lie_on_the_sphere() {
        let ds = generate(&small(2)).unwrap();
        for row in ds.centers().row_iter() {
            assert!((hardneg_core::matrix::norm(row) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&small(5)).unwrap(), generate(&small(5)).unwrap());
        assert_ne!(generate(&small(5)).unwrap(), generate(&small(6)).unwrap());
    }

    #[test]
    fn balanced_labels() {
        let ds = generate(&small(3)).unwrap();
        for k in 0..3 {
            assert_eq!(ds.labels().iter().filter(|&&y| y == k).count(), 20);
        }
    }

    #[test]
    fn zero_noise_pair_is_exact() {
        let ds = generate(&small(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, p) = make_pair(ds.inputs(), 4, 0.0, &mut rng).unwrap();
        assert_eq!(a, p);
        assert!(make_pair(ds.inputs(), 60, 0.1, &mut rng).is_err());
    }

    #[test]
    fn different_draws_give_different_positives() {
        let ds = generate(&small(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, p1) = make_pair(ds.inputs(), 0, 0.3, &mut rng).unwrap();
        let (_, p2) = make_pair(ds.inputs(), 0, 0.3, &mut rng).unwrap();
        assert_ne!(p1, p2);
    }

    #[test]
    fn validation() {
        assert!(SynthConfig {
            num_classes: 1,
            ..small(0)
        }
        .validate(None)
        .is_err());
        assert!(SynthConfig {
            within_class_std: -1.0,
            ..small(0)
        }
        .validate(None)
        .is_err());
        assert!(small(0).validate(Some(30)).is_ok());
        assert!(small(0).validate(Some(31)).is_err());
    }
}
