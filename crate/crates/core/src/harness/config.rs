//! Experiment configuration: TOML on disk, dotted-key overrides on the
//! command line, a canonical JSON form for hashing.
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! layers = 4
//! width = 64
//!
//! [task]
//! facts = 400
//! coverage = 0.8
//!
//! [conformal]
//! trials = 200
//! ```
//!
//! Every section and key is optional; missing values take the defaults below.
//! Model-initialization and training seeds are not configurable on their own:
//! they are derived from the root `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::CalibratorParams;
use crate::conformal::default_alpha_grid;
use crate::error::{Error, Result};
use crate::geometry::MeanPositions;
use crate::microformer::{FactTaskConfig, ModelConfig, TrainConfig};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            layers: m.layers,
            heads: m.heads,
            width: m.width,
            ff_width: m.ff_width,
            vocab: m.vocab,
            max_len: m.max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// Reference : train : calibration : test.
    pub ratios: [f64; 4],
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            ratios: [5.0, 3.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub mean_positions: MeanPositions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub ridge: f64,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            ridge: crate::calibration::DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformalSection {
    pub alpha_grid: Vec<f64>,
    /// Headline α reported in `report.json`.
    pub alpha: f64,
    pub trials: usize,
    /// Share of the pooled calibration and test responses used to calibrate
    /// in each Monte Carlo resplit.
    pub calib_fraction: f64,
}

impl Default for ConformalSection {
    fn default() -> Self {
        Self {
            alpha_grid: default_alpha_grid(),
            alpha: 0.2,
            trials: 200,
            calib_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub task: FactTaskConfig,
    pub train: TrainSection,
    pub split: SplitSection,
    pub geometry: GeometrySection,
    pub stats: StatsSection,
    pub calibrator: CalibratorParams,
    pub conformal: ConformalSection,
    pub ablation: AblationSection,
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidConfig(msg.into()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            layers: m.layers,
            heads: m.heads,
            width: m.width,
            ff_width: m.ff_width,
            vocab: m.vocab,
            max_len: m.max_len,
            seed: derive_seed(self.seed, "model-init"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            seed: derive_seed(self.seed, "train"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.task.validate(self.model.vocab, self.model.max_len)?;
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 {
            return invalid("train.steps and train.batch_size must be positive");
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return invalid("train.learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return invalid("train.beta1/beta2 must lie in [0, 1) and train.eps must be positive");
        }
        let r = &self.split.ratios;
        if r.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || r.iter().sum::<f64>() <= 0.0 {
            return invalid("split.ratios must be nonnegative with a positive sum");
        }
        if !(self.stats.ridge > 0.0 && self.stats.ridge.is_finite()) {
            return invalid("stats.ridge must be positive");
        }
        self.calibrator.gbdt.validate()?;
        if !(self.calibrator.logistic.l2 > 0.0) {
            return invalid("calibrator.logistic.l2 must be positive");
        }
        let c = &self.conformal;
        if c.alpha_grid.is_empty() {
            return invalid("conformal.alpha_grid must not be empty");
        }
        if let Some(a) = c
            .alpha_grid
            .iter()
            .chain([&c.alpha])
            .find(|a| !(**a > 0.0 && **a < 1.0))
        {
            return invalid(format!("conformal alpha {a} outside (0, 1)"));
        }
        if c.trials == 0 {
            return invalid("conformal.trials must be positive");
        }
        if !(c.calib_fraction > 0.0 && c.calib_fraction < 1.0) {
            return invalid("conformal.calib_fraction must lie in (0, 1)");
        }
        if self.ablation.seeds == 0 {
            return invalid("ablation.seeds must be positive");
        }
        Ok(())
    }

    /// Compact JSON with fields in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `dotted.key=value`. The value is read as a TOML literal
    /// (number, boolean, array, quoted string) and falls back to a bare
    /// string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: serde_json::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed key"))
                .map_err(|e| Error::InvalidConfig(e.to_string()))?,
            Err(_) => serde_json::Value::String(raw.to_string()),
        };
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::InvalidConfig(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::InvalidConfig(format!("{key}: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.model_config().feature_dim(), 28);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = ExperimentConfig::from_toml_str("seed = 9\n[task]\nfacts = 50\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.task.facts, 50);
        assert_eq!(c.model, ModelSection::default());
        assert!(ExperimentConfig::from_toml_str("[task]\nfactz = 50\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.set("model.layers=2").unwrap();
        c.set("task.coverage = 1.0").unwrap();
        c.set("calibrator.kind=logistic").unwrap();
        c.set("split.ratios=[1, 1, 1, 1]").unwrap();
        c.set("geometry.mean_positions=all").unwrap();
        assert_eq!(c.model.layers, 2);
        assert_eq!(c.task.coverage, 1.0);
        assert_eq!(c.calibrator.kind, crate::calibration::CalibratorKind::Logistic);
        assert_eq!(c.split.ratios, [1.0; 4]);
        assert_eq!(c.geometry.mean_positions, MeanPositions::All);
        assert!(c.set("model.depth=2").is_err());
        assert!(c.set("model.layers=two").is_err());
        assert!(c.set("nonsense").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.model_config().seed, b.model_config().seed);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for kv in [
            "conformal.alpha=1.0",
            "train.steps=0",
            "stats.ridge=0",
            "model.heads=3",
            "task.coverage=2",
        ] {
            let mut c = ExperimentConfig::default();
            c.set(kv).unwrap();
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))), "{kv}");
        }
    }
}
