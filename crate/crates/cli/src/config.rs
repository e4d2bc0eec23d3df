use std::path::{Path, PathBuf};

use logvm_core::segmodel::ModelConfig;
use logvm_core::train::{SynthTask, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Everything a training or ablation run depends on. Missing keys take their
/// defaults; unknown keys are an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: SynthTask,
    pub train: TrainConfig,
    /// Base seed; ablations use `seed..seed + seeds`.
    pub seed: u64,
    pub seeds: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: SynthTask::default(),
            train: TrainConfig::default(),
            seed: 0,
            seeds: 3,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate().map_err(|e| Failure::Config(e.to_string()))?;
        if self.task.size.as_slice() != self.model.input_size.as_slice() {
            return Err(Failure::Config(format!(
                "task size {:?} does not match model input {:?}",
                self.task.size, self.model.input_size
            )));
        }
        let t = &self.train;
        if t.train_size == 0 || t.val_size == 0 || t.batch_size == 0 || !(t.lr >= 0.0) {
            return Err(Failure::Config("train/val/batch sizes must be positive and lr non-negative".into()));
        }
        if self.seeds == 0 {
            return Err(Failure::Config("seeds must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial, RunConfig { seed: 9, ..RunConfig::default() });
    }

    #[test]
    fn mismatched_task_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.task.size = [16, 16];
        assert!(matches!(cfg.validate(), Err(Failure::Config(_))));
    }
}
