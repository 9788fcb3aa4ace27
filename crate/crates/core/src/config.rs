//! Run configuration: one JSON file driving generation, both training
//! stages, and evaluation. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::BeamConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::scenegen::SceneConfig;
use crate::train::{Stage, TrainConfig};

fn default_n_scenes() -> usize {
    5000
}
fn default_detection_scenes() -> usize {
    5000
}
fn default_fraction() -> f64 {
    0.1
}
fn default_cycle_eval_samples() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Scenes in the gold (expression-annotated) corpus.
    pub n_scenes: usize,
    /// Scenes in the detection-only corpus used for pseudo-labeling.
    pub detection_scenes: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Cap on expressions used per scene when building training samples.
    pub max_expressions_per_scene: Option<usize>,
    /// Cases sampled for cycle round-trip statistics in reports.
    pub cycle_eval_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_scenes: default_n_scenes(),
            detection_scenes: default_detection_scenes(),
            val_fraction: default_fraction(),
            test_fraction: default_fraction(),
            max_expressions_per_scene: None,
            cycle_eval_samples: default_cycle_eval_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub activation: TrainConfig,
    pub cycle: TrainConfig,
    pub beam: BeamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            data: DataConfig::default(),
            activation: TrainConfig { stage: Stage::Activation, ..TrainConfig::default() },
            cycle: TrainConfig {
                stage: Stage::Cycle,
                loss_weights: LossWeights::default(),
                ..TrainConfig::default()
            },
            beam: BeamConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.activation.validate()?;
        self.cycle.validate()?;
        self.beam.validate()?;
        if self.activation.stage != Stage::Activation {
            return Err(Error::InvalidConfig("activation block must have stage=activation".into()));
        }
        if self.cycle.stage != Stage::Cycle {
            return Err(Error::InvalidConfig("cycle block must have stage=cycle".into()));
        }
        if self.data.n_scenes == 0 {
            return Err(Error::InvalidConfig("data.n_scenes must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let config: RunConfig = serde_json::from_str(&body)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// A quick configuration for smoke runs: small model, few scenes, a
    /// couple of epochs. Finishes in about a minute.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.model.d = 32;
        cfg.model.enc_layers = 1;
        cfg.model.dec_layers = 1;
        cfg.model.heads = 2;
        cfg.data.n_scenes = 300;
        cfg.data.detection_scenes = 100;
        cfg.data.val_fraction = 0.15;
        cfg.data.test_fraction = 0.15;
        cfg.data.cycle_eval_samples = 32;
        cfg.scene.max_objects = 3;
        cfg.activation.epochs = 3;
        cfg.activation.lr = 1e-3;
        cfg.activation.batch_size = 16;
        cfg.activation.loss_weights = LossWeights::lm_only();
        cfg.cycle.epochs = 3;
        cfg.cycle.lr = 1e-3;
        cfg.cycle.batch_size = 16;
        cfg.beam.beam_width = 2;
        cfg
    }

    /// The desk-scale configuration: 5000 gold scenes, a d=64 model, and
    /// enough epochs to ground reliably on held-out scenes within the hour.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.d = 64;
        cfg.data.n_scenes = 5000;
        cfg.data.detection_scenes = 2500;
        cfg.data.max_expressions_per_scene = Some(2);
        cfg.activation.epochs = 4;
        cfg.activation.lr = 1.5e-3;
        cfg.activation.batch_size = 32;
        cfg.activation.loss_weights = LossWeights::lm_only();
        cfg.cycle.epochs = 4;
        cfg.cycle.lr = 1e-3;
        cfg.cycle.batch_size = 32;
        cfg.cycle.loss_weights = LossWeights { lm: 0.0, itc: 0.1, itg: 1.0, itm: 0.1, cyc: 1.0 };
        cfg.beam.beam_width = 2;
        cfg
    }
}

/// Output layout under one root directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn gold_corpus_dir(&self) -> PathBuf {
        self.root.join("data").join("gold")
    }

    pub fn detection_corpus_dir(&self) -> PathBuf {
        self.root.join("data").join("detection")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.csv"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.txt"))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn ensure_dirs(&self) -> Result<()> {
        for sub in ["data", "checkpoints", "logs", "reports"] {
            let dir = self.root.join(sub);
            std::fs::create_dir_all(&dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        for cfg in [RunConfig::default(), RunConfig::smoke(), RunConfig::desk()] {
            cfg.validate().unwrap();
            cfg.save(&path).unwrap();
            let loaded = RunConfig::load(&path).unwrap();
            assert_eq!(cfg, loaded);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, "{\"seed\": 1, \"bogus\": true}").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn stage_mismatch_rejected() {
        let mut cfg = RunConfig::default();
        cfg.cycle.stage = Stage::Activation;
        assert!(cfg.validate().is_err());
    }
}
