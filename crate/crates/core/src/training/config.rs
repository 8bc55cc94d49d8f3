use serde::{Deserialize, Serialize};

use crate::dataset::AugmentationConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Encoder and classifier trained jointly with cross-entropy.
    Supervised,
    /// Contrastive pretraining, then a linear probe on the frozen encoder.
    Supcon,
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Paradigm::Supervised),
            "supcon" => Ok(Paradigm::Supcon),
            other => Err(Error::InvalidParameter(format!("unknown paradigm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Contrastive temperature; unused by the supervised paradigm.
    pub temperature: f64,
    /// Linear-probe learning rate; falls back to `learning_rate`.
    #[serde(default)]
    pub probe_learning_rate: Option<f64>,
    /// Linear-probe epochs; falls back to `epochs`.
    #[serde(default)]
    pub probe_epochs: Option<usize>,
    /// Projection hidden width; falls back to the encoder width.
    #[serde(default)]
    pub projection_hidden: Option<usize>,
    pub projection_dim: usize,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale hyperparameters: AdamW at 5e-6, weight decay 0.05,
    /// batch 16, 50 epochs, temperature 0.1, 384-pixel inputs.
    pub fn full(paradigm: Paradigm, seed: u64) -> Self {
        TrainConfig {
            paradigm,
            learning_rate: 5e-6,
            weight_decay: 0.05,
            batch_size: 16,
            epochs: 50,
            temperature: 0.1,
            probe_learning_rate: None,
            probe_epochs: None,
            projection_hidden: None,
            projection_dim: 128,
            augmentation: AugmentationConfig::new(384, 384, 15.0, seed),
            seed,
        }
    }

    /// Desk-scale profile for the synthetic toy datasets (64-pixel images,
    /// 56-pixel crops).
    pub fn toy(paradigm: Paradigm, seed: u64) -> Self {
        TrainConfig {
            paradigm,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            batch_size: 16,
            epochs: 30,
            temperature: 0.1,
            probe_learning_rate: Some(1e-2),
            probe_epochs: None,
            projection_hidden: None,
            projection_dim: 32,
            augmentation: AugmentationConfig::new(64, 56, 10.0, seed),
            seed,
        }
    }

    pub fn preset(name: &str, paradigm: Paradigm, seed: u64) -> Result<Self> {
        match name {
            "full" => Ok(TrainConfig::full(paradigm, seed)),
            "toy" => Ok(TrainConfig::toy(paradigm, seed)),
            other => Err(Error::InvalidParameter(format!("unknown preset `{other}`"))),
        }
    }

    pub fn probe_lr(&self) -> f64 {
        self.probe_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn probe_epoch_count(&self) -> usize {
        self.probe_epochs.unwrap_or(self.epochs)
    }

    /// Every problem with the configuration.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(lr) = self.probe_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                out.push(format!("probe_learning_rate must be positive, got {lr}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            out.push(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.paradigm == Paradigm::Supcon {
            if !(self.temperature > 0.0 && self.temperature.is_finite()) {
                out.push(format!("supcon needs temperature > 0, got {}", self.temperature));
            }
            if self.projection_dim == 0 || self.projection_hidden == Some(0) {
                out.push("projection head widths must be positive".to_string());
            }
        }
        out.extend(self.augmentation.diagnostics());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(d.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for p in [Paradigm::Supervised, Paradigm::Supcon] {
            assert!(TrainConfig::full(p, 0).diagnostics().is_empty());
            assert!(TrainConfig::toy(p, 0).diagnostics().is_empty());
        }
        let full = TrainConfig::full(Paradigm::Supcon, 1);
        assert_eq!(full.learning_rate, 5e-6);
        assert_eq!(full.weight_decay, 0.05);
        assert_eq!(full.batch_size, 16);
        assert_eq!(full.epochs, 50);
        assert_eq!(full.temperature, 0.1);
        assert_eq!(full.augmentation.resize_to, 384);
        assert_eq!(full.probe_lr(), 5e-6);
        assert_eq!(full.probe_epoch_count(), 50);
    }

    #[test]
    fn all_problems_reported_together() {
        let mut c = TrainConfig::full(Paradigm::Supcon, 0);
        c.temperature = 0.0;
        c.batch_size = 1;
        c.augmentation = AugmentationConfig::new(384, 512, 15.0, 0);
        let d = c.diagnostics();
        assert_eq!(d.len(), 3, "{d:?}");
        assert!(c.validate().is_err());
        c.paradigm = Paradigm::Supervised;
        assert_eq!(c.diagnostics().len(), 2);
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = TrainConfig::toy(Paradigm::Supcon, 7);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
