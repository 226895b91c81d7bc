//! Run configuration: nested sections mirroring each module's config type,
//! parsed from TOML with unknown keys rejected. Defaults carry the full-scale
//! values; [`RunConfig::desk`] is the small profile used for synthetic runs.

use crate::data::nih::NIH_CLASSES;
use crate::data::preprocess::PreprocessConfig;
use crate::data::split::SplitSpec;
use crate::data::synthetic::SyntheticSpec;
use crate::error::{Error, Result};
use crate::explain::ExplainConfig;
use crate::model::{BackboneId, ModelConfig};
use crate::objectives::LossConfig;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (images/, labels.csv, bboxes.csv, classes.txt).
    pub dataset_dir: Option<String>,
    pub split: SplitSpec,
    pub preprocess: PreprocessConfig,
    pub synthetic: SyntheticSpec,
    /// Sample counts for synthetic generation (train + val + test total).
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset_dir: None,
            split: SplitSpec::default(),
            preprocess: PreprocessConfig::default(),
            synthetic: SyntheticSpec::default(),
            n_train: 2000,
            n_val: 400,
            n_test: 400,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    /// Full-scale defaults: 14 classes, K=3, D=128, 512x512 input, batch 32.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                num_classes: NIH_CLASSES.len(),
                prototypes_per_class: 3,
                feature_dim: 128,
                input_size: (512, 512),
                backbone: BackboneId::SmallCnn,
                backbone_channels: [16, 32, 64, 128],
                seed: 0,
            },
            loss: LossConfig::default(),
            train: TrainConfig { batch_size: 32, ..TrainConfig::default() },
            data: DataConfig {
                preprocess: PreprocessConfig { input_size: 512, ..PreprocessConfig::default() },
                ..DataConfig::default()
            },
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale profile: 3 synthetic classes, 64x64 input, 8x8 grid.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig {
                num_classes: 3,
                prototypes_per_class: 3,
                feature_dim: 64,
                input_size: (64, 64),
                backbone: BackboneId::SmallCnn,
                backbone_channels: [8, 16, 32, 32],
                seed: 0,
            },
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            explain: ExplainConfig::default(),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate_shape()?;
        Ok(cfg)
    }

    /// Structural validation (no path checks).
    pub fn validate_shape(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.split.validate()?;
        self.data.synthetic.validate()?;
        if self.data.preprocess.input_size != self.model.input_size.0
            || self.model.input_size.0 != self.model.input_size.1
        {
            return Err(Error::Config(format!(
                "preprocess input_size {} must match square model input {:?}",
                self.data.preprocess.input_size, self.model.input_size
            )));
        }
        Ok(())
    }

    /// Path validation for commands that read a dataset.
    pub fn require_dataset(&self) -> Result<&Path> {
        let dir = self
            .data
            .dataset_dir
            .as_deref()
            .ok_or_else(|| Error::Config("data.dataset_dir is not set".into()))?;
        let p = Path::new(dir);
        if !p.is_dir() {
            return Err(Error::Config(format!("data.dataset_dir {dir} does not exist")));
        }
        Ok(p)
    }

    /// Apply a master seed to every seeded component.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.data.split.seed = seed;
        self.data.synthetic.seed = seed;
    }

    /// Write the fully-resolved configuration next to a run's outputs.
    pub fn echo(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config echo: {e}")))?;
        std::fs::write(out_dir.join("config_resolved.toml"), text)?;
        Ok(())
    }
}
