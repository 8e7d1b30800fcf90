//! Model and training configuration, and the JSON config file that carries them.
//!
//! ```json
//! {
//!   "model":    { "hidden": 64, "encoder_layers": 2, "heads": 4, "ff_dim": 256,
//!                 "max_length": 128, "interaction_layers": 3, "truncate": false,
//!                 "dropout": 0.1 },
//!   "training": { "max_epochs": 40, "batch_size": 16, "learning_rate": 1e-4,
//!                 "lambda": 2.0, "early_stop_patience": 10, "seed": 0 },
//!   "data":     { "strict": false, "min_count": 1 },
//!   "ablation": { "variant": "none" }
//! }
//! ```
//!
//! `model` and `training` are required, as is `training.max_epochs`; every
//! other key has a default. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Full model.
    #[default]
    None,
    /// Interaction layers skip the graph encoder.
    NoGraph,
    /// Interaction layers skip token and sentence alignment.
    NoAlign,
    /// Span and sentence predictions come from two independently trained towers.
    SeparateTrain,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoGraph,
        Ablation::NoAlign,
        Ablation::SeparateTrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoGraph => "no_graph",
            Ablation::NoAlign => "no_align",
            Ablation::SeparateTrain => "separate_train",
        }
    }

    pub fn uses_graph(self) -> bool {
        self != Ablation::NoGraph
    }

    pub fn uses_align(self) -> bool {
        self != Ablation::NoAlign
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation `{s}` (expected none|no_graph|no_align|separate_train)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden size `d` shared by every layer.
    pub hidden: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    /// Feed-forward width inside the encoder; `None` means `4 × hidden`.
    pub ff_dim: Option<usize>,
    /// Longest packed sequence (`m + n + 2`); also the position table size.
    pub max_length: usize,
    pub interaction_layers: usize,
    /// Drop trailing passage sentences instead of failing on over-length input.
    pub truncate: bool,
    /// Dropout rate inside the encoder during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            encoder_layers: 2,
            heads: 4,
            ff_dim: None,
            max_length: 128,
            interaction_layers: 3,
            truncate: false,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn ff_width(&self) -> usize {
        self.ff_dim.unwrap_or(4 * self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.max_length < 3 || self.ff_width() == 0 {
            return err(format!("model dimensions must be positive: {self:?}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return err(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.interaction_layers < 1 {
            return err("interaction_layers must be at least 1".into());
        }
        Ok(())
    }
}

/// Everything a training run needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the sentence loss.
    pub lambda: f64,
    pub max_epochs: usize,
    /// Validation evaluations without improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            ablation: Ablation::None,
            batch_size: 16,
            learning_rate: 1e-4,
            lambda: 2.0,
            max_epochs: 50,
            early_stop_patience: 10,
            seed: 0,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err("lambda must be non-negative");
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 || self.min_count == 0 {
            return err("max_epochs, early_stop_patience and min_count must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub max_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_patience")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_batch() -> usize {
    16
}
fn d_lr() -> f64 {
    1e-4
}
fn d_lambda() -> f64 {
    2.0
}
fn d_patience() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Require at least two answers per example when loading.
    pub strict: bool,
    pub min_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            strict: false,
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub variant: Ablation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub training: TrainingSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub ablation: AblationSection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("schema error: {e}")))?;
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            ablation: self.ablation.variant,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            lambda: self.training.lambda,
            max_epochs: self.training.max_epochs,
            early_stop_patience: self.training.early_stop_patience,
            seed: self.training.seed,
            min_count: self.data.min_count,
        }
    }

    /// Fully-populated JSON echo, defaults included.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let c = ConfigFile::parse(r#"{"model": {}, "training": {"max_epochs": 3}}"#).unwrap();
        let t = c.train_config();
        assert_eq!(t.learning_rate, 1e-4);
        assert_eq!(t.batch_size, 16);
        assert_eq!(t.lambda, 2.0);
        assert_eq!(t.model.interaction_layers, 3);
        assert_eq!(t.early_stop_patience, 10);
        assert_eq!(t.ablation, Ablation::None);
        let echoed = ConfigFile::parse(&c.to_json_pretty()).unwrap();
        assert_eq!(echoed, c);
    }

    #[test]
    fn missing_key_is_named() {
        let err = ConfigFile::parse(r#"{"model": {}, "training": {}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("max_epochs"), "{err}");
        let err = ConfigFile::parse(r#"{"training": {"max_epochs": 1}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("model"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ConfigFile::parse(r#"{"model": {"hiden": 3}, "training": {"max_epochs": 1}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("hiden"), "{err}");
        assert!(
            ConfigFile::parse(r#"{"model": {}, "training": {"max_epochs": 1}, "extra": 1}"#)
                .is_err()
        );
    }

    #[test]
    fn ablation_names() {
        let c = ConfigFile::parse(
            r#"{"model": {}, "training": {"max_epochs": 1}, "ablation": {"variant": "no_graph"}}"#,
        )
        .unwrap();
        assert_eq!(c.train_config().ablation, Ablation::NoGraph);
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("graphless".parse::<Ablation>().is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ConfigFile::parse(
            r#"{"model": {"hidden": 10, "heads": 4}, "training": {"max_epochs": 1}}"#
        )
        .is_err());
        assert!(ConfigFile::parse(
            r#"{"model": {"interaction_layers": 0}, "training": {"max_epochs": 1}}"#
        )
        .is_err());
        assert!(ConfigFile::parse(
            r#"{"model": {}, "training": {"max_epochs": 1, "batch_size": 0}}"#
        )
        .is_err());
    }
}
