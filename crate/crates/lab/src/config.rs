//! Run configuration: the typed [`TrainConfig`] used by the harness and the
//! flat key-value [`RunConfig`] read from TOML files and command-line flags.

use hardneg_core::{Activation, AdamConfig, DistributionKind, LossConfig, LossKind, NegativeMode, SinkhornConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::readout::ReadoutConfig;
use crate::synth::SynthConfig;
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sampler: DistributionKind,
    pub loss: LossConfig,
    pub negative_mode: NegativeMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub eval_every: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    /// Solver settings; `epsilon` is taken from `sampler`.
    pub sinkhorn: SinkhornConfig,
    pub augment_noise_std: f64,
    /// Leading dataset rows used for metrics.
    pub probe_size: usize,
    pub readout: ReadoutConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        RunConfig::default().train_config()
    }
}

impl TrainConfig {
    /// Negatives per anchor: `m` in sampled mode, otherwise every allowed batch member.
    pub fn negatives_per_anchor(&self) -> usize {
        match self.negative_mode {
            NegativeMode::Sampled { m } => m,
            NegativeMode::Weighted => self.batch_size.saturating_sub(1),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1".into());
        }
        if let NegativeMode::Sampled { m } = self.negative_mode {
            if m < 1 {
                return bad("m must be at least 1".into());
            }
            if self.batch_size < m + 2 {
                return bad(format!(
                    "batch_size {} must be at least m + 2 = {}",
                    self.batch_size,
                    m + 2
                ));
            }
        } else if self.batch_size < 3 {
            return bad("batch_size must be at least 3".into());
        }
        if self.loss.kind == LossKind::Triplet && self.negative_mode != (NegativeMode::Sampled { m: 1 }) {
            return bad("the triplet loss takes one sampled negative: use negative_mode = sampled, m = 1".into());
        }
        self.loss.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        match self.sampler {
            DistributionKind::Uniform => {}
            DistributionKind::Tilt { beta } if beta >= 0.0 && beta.is_finite() => {}
            DistributionKind::Tilt { .. } => return bad("beta must be finite and non-negative".into()),
            DistributionKind::EntropicOt { epsilon } => {
                SinkhornConfig {
                    epsilon,
                    ..self.sinkhorn
                }
                .validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            }
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("adam: lr must be non-negative, betas in [0, 1)".into());
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad("adam: eps must be positive and weight_decay non-negative".into());
        }
        if self.embed_dim < 1 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if !(self.augment_noise_std >= 0.0) || !self.augment_noise_std.is_finite() {
            return bad("augment_noise_std must be finite and non-negative".into());
        }
        if self.probe_size < self.batch_size.max(self.readout.folds) {
            return bad("probe_size must cover one batch and one sample per readout fold".into());
        }
        Ok(())
    }

    /// Encoder layer widths from input to embedding.
    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.embed_dim);
        dims
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerName {
    Uniform,
    Tilt,
    Ot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LossName {
    Triplet,
    Nce,
    LargeMNce,
    DebiasedNce,
    UpperBound,
}

impl From<LossName> for LossKind {
    fn from(l: LossName) -> Self {
        match l {
            LossName::Triplet => LossKind::Triplet,
            LossName::Nce => LossKind::Nce,
            LossName::LargeMNce => LossKind::LargeMNce,
            LossName::DebiasedNce => LossKind::DebiasedNce,
            LossName::UpperBound => LossKind::UpperBound,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Weighted,
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationName {
    Identity,
    Tanh,
    SmoothRelu,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Identity => Activation::Identity,
            ActivationName::Tanh => Activation::Tanh,
            ActivationName::SmoothRelu => Activation::SmoothRelu,
        }
    }
}

/// Every tunable of a run as flat keys. This is the schema of the TOML
/// config file; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // data
    pub num_classes: usize,
    pub ambient_dim: usize,
    pub samples_per_class: usize,
    pub class_center_spread: f64,
    pub within_class_std: f64,
    pub augment_noise_std: f64,
    pub data_seed: u64,
    // negatives
    pub sampler: SamplerName,
    pub epsilon: f64,
    /// Tilt strength; `1 / epsilon` when absent.
    pub beta: Option<f64>,
    pub negative_mode: ModeName,
    pub m: usize,
    // loss
    pub loss: LossName,
    /// NCE weight; `m` when absent.
    pub q: Option<f64>,
    pub eta: f64,
    pub tau_plus: f64,
    pub temperature: f64,
    // optimization
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    // encoder
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: ActivationName,
    // solver
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tolerance: f64,
    pub stabilization_threshold: f64,
    // evaluation
    pub probe_size: usize,
    pub readout_folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let adam = AdamConfig::default();
        let solver = SinkhornConfig::default();
        let loss = LossConfig::default();
        Self {
            num_classes: synth.num_classes,
            ambient_dim: synth.ambient_dim,
            samples_per_class: synth.samples_per_class,
            class_center_spread: synth.class_center_spread,
            within_class_std: synth.within_class_std,
            augment_noise_std: synth.augment_noise_std,
            data_seed: synth.seed,
            sampler: SamplerName::Ot,
            epsilon: 0.5,
            beta: None,
            negative_mode: ModeName::Weighted,
            m: 16,
            loss: LossName::Nce,
            q: None,
            eta: loss.eta,
            tau_plus: loss.tau_plus,
            temperature: loss.temperature,
            batch_size: 128,
            epochs: 200,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            seed: 0,
            eval_every: 10,
            hidden: vec![64, 64],
            embed_dim: 16,
            activation: ActivationName::Tanh,
            sinkhorn_max_iters: solver.max_iters,
            sinkhorn_tolerance: solver.tolerance,
            stabilization_threshold: solver.stabilization_threshold,
            probe_size: 1000,
            readout_folds: 5,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(format!("config file: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Single-line JSON form, used in file headers and for hashing.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("embedded config: {e}")))
    }

    /// First 8 hex digits of the SHA-256 of [`RunConfig::to_json`].
    pub fn hash8(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        hex::encode(digest)[..8].to_string()
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_classes: self.num_classes,
            ambient_dim: self.ambient_dim,
            samples_per_class: self.samples_per_class,
            class_center_spread: self.class_center_spread,
            within_class_std: self.within_class_std,
            augment_noise_std: self.augment_noise_std,
            seed: self.data_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let sampler = match self.sampler {
            SamplerName::Uniform => DistributionKind::Uniform,
            SamplerName::Tilt => DistributionKind::Tilt {
                beta: self.beta.unwrap_or(1.0 / self.epsilon),
            },
            SamplerName::Ot => DistributionKind::EntropicOt { epsilon: self.epsilon },
        };
        let negative_mode = match self.negative_mode {
            ModeName::Weighted => NegativeMode::Weighted,
            ModeName::Sampled => NegativeMode::Sampled { m: self.m },
        };
        TrainConfig {
            sampler,
            loss: LossConfig {
                kind: self.loss.into(),
                eta: self.eta,
                q: self.q.unwrap_or(self.m as f64),
                tau_plus: self.tau_plus,
                temperature: self.temperature,
            },
            negative_mode,
            batch_size: self.batch_size,
            epochs: self.epochs,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            seed: self.seed,
            eval_every: self.eval_every,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            activation: self.activation.into(),
            sinkhorn: SinkhornConfig {
                epsilon: self.epsilon,
                max_iters: self.sinkhorn_max_iters,
                tolerance: self.sinkhorn_tolerance,
                stabilization_threshold: self.stabilization_threshold,
                ..SinkhornConfig::default()
            },
            augment_noise_std: self.augment_noise_std,
            probe_size: self.probe_size,
            readout: ReadoutConfig {
                folds: self.readout_folds,
                ..ReadoutConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let synth = self.synth_config();
        synth
            .validate(Some(self.batch_size))
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let train = self.train_config();
        train.validate()?;
        if self.probe_size > synth.len() {
            return Err(HarnessError::Config(format!(
                "probe_size {} exceeds the dataset size {}",
                self.probe_size,
                synth.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn zero_epochs_is_rejected() {
        let cfg = RunConfig {
            epochs: 0,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn sampled_batches_must_hold_m_plus_two() {
        let cfg = RunConfig {
            negative_mode: ModeName::Sampled,
            m: 20,
            batch_size: 21,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig { batch_size: 22, ..cfg };
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig {
            sampler: SamplerName::Tilt,
            beta: Some(3.0),
            hidden: vec![8],
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("epsilon = 0.1\nloss = \"debiased-nce\"\n").unwrap();
        assert_eq!(partial.epsilon, 0.1);
        assert_eq!(partial.loss, LossName::DebiasedNce);
        assert_eq!(partial.batch_size, 128);
        assert!(RunConfig::from_toml("no_such_key = 1").is_err());
    }

    #[test]
    fn derived_defaults() {
        let cfg = RunConfig {
            sampler: SamplerName::Tilt,
            epsilon: 0.25,
            m: 7,
            ..RunConfig::default()
        };
        let t = cfg.train_config();
        assert_eq!(t.sampler, DistributionKind::Tilt { beta: 4.0 });
        assert_eq!(t.loss.q, 7.0);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_eq!(a.hash8(), RunConfig::default().hash8());
        assert_ne!(a.hash8(), b.hash8());
        assert_eq!(a.hash8().len(), 8);
    }
}
