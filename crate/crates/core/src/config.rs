//! The run configuration document: `model`, `train` and `refine` sections.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fewshot::RefineConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.refine.validate()
    }

    /// Parses and validates; missing keys take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides in order. Values are read as
    /// JSON, falling back to a plain string (`refine.expert_mode=simulated`).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` is not of the form section.key=value")))?;
            let (section, key) = path
                .split_once('.')
                .ok_or_else(|| Error::config(format!("override key `{path}` must be section.key")))?;
            let slot = doc
                .get_mut(section)
                .and_then(|s| s.as_object_mut())
                .ok_or_else(|| Error::config(format!("unknown config section `{section}`")))?;
            if !slot.contains_key(key) {
                return Err(Error::config(format!("unknown config key `{path}`")));
            }
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
            slot.insert(key.to_owned(), value);
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fewshot::ExpertMode;

    #[test]
    fn defaults_follow_the_published_setup() {
        let c = RunConfig::default();
        assert_eq!((c.train.epochs, c.train.early_stop_patience, c.train.batch_size), (100, 10, 8));
        assert_eq!((c.train.lr0, c.train.adam_beta1, c.train.adam_beta2), (1e-3, 0.9, 0.999));
        assert_eq!((c.train.plateau_patience, c.train.decay_factor), (5, 10.0));
        assert_eq!((c.refine.theta, c.refine.selection_fraction, c.refine.finetune_epochs), (0.5, 0.05, 5));
        assert_eq!(c.refine.lr_divisor, 10.0);
        assert!(!c.refine.replay);
    }

    #[test]
    fn canonical_round_trip_and_partial_documents() {
        let c = RunConfig::default().with_overrides(&["model.depth=2", "train.seed=9"]).unwrap();
        assert_eq!(RunConfig::from_json(&c.to_canonical()).unwrap(), c);
        let partial = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(RunConfig::from_json(r#"{"training": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(RunConfig::default().with_overrides(&["train.epoch=3"]).is_err());
        assert!(RunConfig::default().with_overrides(&["data.size=3"]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.epochs"]).is_err());
    }

    #[test]
    fn overrides_apply_in_order_and_validate() {
        let c = RunConfig::default()
            .with_overrides(&["refine.expert_mode=interactive", "train.lr0=0.01", "train.lr0=0.002"])
            .unwrap();
        assert_eq!(c.refine.expert_mode, ExpertMode::Interactive);
        assert_eq!(c.train.lr0, 0.002);
        assert!(matches!(
            RunConfig::default().with_overrides(&["refine.finetune_epochs=0"]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn load_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"train": {"batch_size": 0}}"#).unwrap();
        let err = RunConfig::load(&p).unwrap_err().to_string();
        assert!(err.contains("run.json") && err.contains("batch_size"), "{err}");
    }
}
