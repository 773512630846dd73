//! The JSON run configuration.
//!
//! Every section is optional; missing keys take their defaults. Example:
//!
//! ```json
//! {
//!   "model": { "dim": 64, "depth": 4, "prompts": "both" },
//!   "train": { "steps": 1500, "videos_per_batch": 2, "frames_per_video": 4 },
//!   "data": { "videos": 2, "frames": 24, "seed": 7 },
//!   "tracker": { "window_weight": 0.49 }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, SampleConfig, VideoSpec};
use crate::error::Result;
use crate::head::LossConfig;
use crate::model::ModelConfig;
use crate::prompts::PromptMode;
use crate::tracker::TrackerConfig;
use crate::train::TrainConfig;

/// Baseline-versus-prompts comparison settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// One model per arm is trained for each seed.
    pub seeds: Vec<u64>,
    pub baseline: PromptMode,
    pub treatment: PromptMode,
    /// Training videos; the `data` section is not used by the ablation.
    pub train_data: DatasetConfig,
    /// Held-out evaluation videos.
    pub suite: DatasetConfig,
}

/// Videos whose target hue drifts and whose size oscillates.
pub fn drift_spec() -> VideoSpec {
    VideoSpec {
        drift_rate: 6.0,
        scale_amplitude: 0.15,
        ..VideoSpec::default()
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            baseline: PromptMode::None,
            treatment: PromptMode::Both,
            train_data: DatasetConfig {
                videos: 32,
                frames: 32,
                seed: 11,
                spec: drift_spec(),
                ..DatasetConfig::default()
            },
            suite: DatasetConfig {
                videos: 20,
                frames: 40,
                seed: 2024,
                spec: drift_spec(),
                ..DatasetConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub data: DatasetConfig,
    pub sampling: SampleConfig,
    pub ablation: AblationConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sampling settings with crop geometry taken from the model and
    /// tracker sections.
    pub fn sampling(&self) -> SampleConfig {
        SampleConfig {
            template_size: self.model.template_size,
            search_size: self.model.search_size,
            template_factor: self.tracker.template_factor,
            search_factor: self.tracker.search_factor,
            ..self.sampling
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = Config::from_json(
            r#"{"model": {"dim": 32, "prompts": "none"}, "train": {"steps": 5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.model.prompts, PromptMode::None);
        assert_eq!(cfg.model.depth, ModelConfig::default().depth);
        assert_eq!(cfg.train.steps, 5);
        let s = cfg.sampling();
        assert_eq!((s.template_size, s.search_size), (48, 96));
        assert_eq!((s.template_factor, s.search_factor), (2.0, 4.0));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let cfg = Config::default();
        assert_eq!(Config::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(Config::from_json(r#"{"model": {"dim": 30, "heads": 4}}"#).is_err());
        assert!(Config::from_json(r#"{"model": {"search_size": 100}}"#).is_err());
        assert!(Config::from_json(r#"{"modle": {}}"#).is_ok());
    }
}
