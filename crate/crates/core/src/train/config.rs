//! TOML training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imperfect::{NoiseConfig, SimConfig};
use crate::model::ModelConfig;
use crate::train::loss::LossConfig;
use crate::train::optim::OptimConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub background: [f64; 3],
    /// Supervision views per scene and step.
    pub targets_per_step: usize,
    /// Scenes whose gradients are averaged into one step.
    pub batch_scenes: usize,
    pub stage1_max_views: usize,
    pub stage2_max_views: usize,
    /// Radiance-field pretraining renders `patch_size^2` rays per target,
    /// spaced `patch_stride` pixels apart.
    pub ray_samples: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            background: [1.0; 3],
            targets_per_step: 4,
            batch_scenes: 4,
            stage1_max_views: 16,
            stage2_max_views: 32,
            ray_samples: 16,
            patch_size: 16,
            patch_stride: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepCounts {
    pub stage1: u64,
    pub stage2: u64,
    pub finetune: u64,
}

impl Default for StepCounts {
    fn default() -> Self {
        Self {
            stage1: 1000,
            stage2: 5000,
            finetune: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub noise: NoiseConfig,
    pub sim: SimConfig,
    pub data: DataConfig,
    pub steps: StepCounts,
}

impl TrainConfig {
    /// [`ModelConfig::tiny`] with ray patches that fit its 16x16 images.
    pub fn tiny() -> Self {
        let mut cfg = Self {
            model: ModelConfig::tiny(),
            ..Self::default()
        };
        cfg.data.patch_size = 8;
        cfg.data.ray_samples = 8;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.noise.validate()?;
        let d = &self.data;
        if d.targets_per_step == 0 || d.batch_scenes == 0 {
            return Err(invalid("targets_per_step and batch_scenes must be positive"));
        }
        if d.stage1_max_views == 0 || d.stage2_max_views == 0 {
            return Err(invalid("view limits must be positive"));
        }
        if d.ray_samples < 2 || d.patch_size == 0 || d.patch_stride == 0 {
            return Err(invalid("ray_samples >= 2, patch_size and patch_stride > 0 required"));
        }
        let span = (d.patch_size - 1) * d.patch_stride + 1;
        if span > self.model.encoder.image_size {
            return Err(invalid("ray patch does not fit in the image"));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}
