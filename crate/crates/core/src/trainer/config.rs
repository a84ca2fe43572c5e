use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AugmentConfig, ViewSpec};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Stochastic gradient descent with heavy-ball momentum.
    Sgd,
    /// Adam with decoupled weight decay.
    #[default]
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to weight matrices and kernels only, not to norms or biases.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewsConfig {
    pub large: ViewSpec,
    pub small: ViewSpec,
    pub multicrop: bool,
    /// Number of small views when multi-crop is on; there are always 2 large views.
    pub n_small: usize,
    pub augment: AugmentConfig,
}

impl Default for ViewsConfig {
    fn default() -> Self {
        Self {
            large: ViewSpec {
                area_range: (0.25, 1.0),
                out_size: (64, 64),
                ..ViewSpec::default()
            },
            small: ViewSpec {
                area_range: (0.05, 0.25),
                out_size: (32, 32),
                ..ViewSpec::default()
            },
            multicrop: false,
            n_small: 6,
            augment: AugmentConfig::default(),
        }
    }
}

impl ViewsConfig {
    pub fn n_views(&self) -> usize {
        if self.multicrop {
            2 + self.n_small
        } else {
            2
        }
    }
}

/// Everything that determines a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Drives initialization, view sampling and data order.
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    /// Save a checkpoint every this many steps; 0 saves only the initial and final states.
    pub checkpoint_every: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub views: ViewsConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            epochs: 8,
            warmup_epochs: 1,
            base_lr: 3e-3,
            final_lr: 1e-5,
            checkpoint_every: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            views: ViewsConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.final_lr >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        let large = self.views.large.out_size;
        if large != (self.model.encoder.input_size, self.model.encoder.input_size) {
            return Err(Error::Config(format!(
                "large view size {large:?} must equal encoder input_size {}",
                self.model.encoder.input_size
            )));
        }
        for spec in [&self.views.large, &self.views.small] {
            self.model.encoder.map_size(spec.out_size.0)?;
            self.model.encoder.map_size(spec.out_size.1)?;
        }
        if self.views.multicrop && self.views.n_small == 0 {
            return Err(Error::Config("multicrop needs n_small >= 1".into()));
        }
        Ok(())
    }

    /// Model config whose initialization seed is the run seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            init_seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the field at a dotted path, e.g. `loss.alpha` or
    /// `optimizer.kind`. The value is read as a TOML literal, falling back to a
    /// bare string.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let mut doc = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = parse_literal(value);
        let keys: Vec<&str> = path.split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields at least one piece");
        let mut table = &mut doc;
        for key in parents {
            table = table
                .get_mut(*key)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Config(format!("unknown config section {key:?} in {path:?}")))?;
        }
        match table.get_mut(*last) {
            Some(slot) => *slot = parsed,
            None => return Err(Error::Config(format!("unknown config key {path:?}"))),
        }
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{path} = {value}: {e}")))?;
        Ok(())
    }
}

fn parse_literal(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = TrainConfig::default();
        cfg.set("loss.alpha", "1.0").unwrap();
        cfg.set("optimizer.kind", "sgd").unwrap();
        cfg.set("views.large.area_range", "[0.5, 1.0]").unwrap();
        cfg.set("model.encoder.stage_channels", "[8, 16, 128]").unwrap();
        assert_eq!(cfg.loss.alpha, 1.0);
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Sgd);
        assert_eq!(cfg.views.large.area_range, (0.5, 1.0));
        assert_eq!(cfg.model.encoder.stage_channels, vec![8, 16, 128]);
        assert!(cfg.set("loss.nope", "1").is_err());
        assert!(cfg.set("loss.alpha", "\"high\"").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = TrainConfig::from_toml("seed = 9\n[loss]\nalpha = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.loss.alpha, 0.5);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn warmup_longer_than_training_is_rejected() {
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 2,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
