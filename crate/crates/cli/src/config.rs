//! Experiment description read by `--config`.

use std::path::{Path, PathBuf};

use mlsnn::coding::Slicing;
use mlsnn::network::{BlockVariant, ModelConfig};
use mlsnn::training::{synthetic_bars, Dataset, OptimizerConfig, TrainConfig};
use mlsnn::{Error, Result};
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Path(PathBuf),
    Inline(Box<ModelConfig>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Seeded 4-class oriented bars, 1x8x8.
    Synthetic {
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_noise")]
        noise: f32,
    },
    /// `.mltn` tensors plus `labels.csv`.
    Images { path: PathBuf, classes: usize },
    /// Event CSV recordings plus `labels.csv`, framed into T slices.
    Events {
        path: PathBuf,
        classes: usize,
        width: u16,
        height: u16,
        #[serde(default)]
        slicing: Slicing,
    },
}

fn default_samples() -> usize {
    256
}

fn default_noise() -> f32 {
    0.15
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(1e-3)
}

fn default_epochs() -> usize {
    10
}

fn default_batch() -> usize {
    32
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelRef,
    pub dataset: DatasetSpec,
    /// Samples held out from the end of the dataset for validation.
    #[serde(default)]
    pub validation: usize,
    #[serde(rename = "T", default)]
    pub timesteps: Option<usize>,
    #[serde(rename = "N", default)]
    pub levels: Option<u32>,
    #[serde(default)]
    pub variant: Option<BlockVariant>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub hflip: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

/// A config with every reference resolved and every field checked.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelConfig,
    pub base: PathBuf,
}

impl Experiment {
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut config: ExperimentConfig = mlsnn::io::read_json(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Some(s) = seed {
            config.seed = s;
        }
        match out {
            Some(o) => config.out_dir = o.to_path_buf(),
            None => config.out_dir = base.join(&config.out_dir),
        }
        let mut model = match &config.model {
            ModelRef::Inline(m) => (**m).clone(),
            ModelRef::Path(p) => ModelConfig::load(&base.join(p))?,
        };
        if let Some(t) = config.timesteps {
            model.timesteps = t;
        }
        if let Some(n) = config.levels {
            model.levels = n;
        }
        if let Some(v) = config.variant {
            model.variant = v;
        }
        model.validate()?;
        let exp = Experiment { config, model, base };
        exp.train_config().validate()?;
        Ok(exp)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut tc = TrainConfig::new(self.config.optimizer, self.config.epochs);
        tc.batch_size = self.config.batch_size;
        tc.seed = self.config.seed;
        tc.hflip = self.config.hflip;
        tc
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    /// Loads the dataset and splits off the validation tail.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let data = match &self.config.dataset {
            DatasetSpec::Synthetic { samples, noise } => synthetic_bars(*samples, self.config.seed, *noise),
            DatasetSpec::Images { path, classes } => Dataset::load_images(&self.base.join(path), *classes)?,
            DatasetSpec::Events {
                path,
                classes,
                width,
                height,
                slicing,
            } => Dataset::load_events(
                &self.base.join(path),
                *classes,
                *width,
                *height,
                self.model.timesteps,
                *slicing,
            )?,
        };
        if data.classes() != self.model.classes {
            return Err(Error::config(format!(
                "dataset has {} classes, model expects {}",
                data.classes(),
                self.model.classes
            )));
        }
        if data.frame_shape() != Some(self.model.input_shape) && !data.is_empty() {
            return Err(Error::config(format!(
                "dataset frames are {:?}, model input is {:?}",
                data.frame_shape(),
                self.model.input_shape
            )));
        }
        if self.config.validation >= data.len() {
            return Err(Error::config(format!(
                "validation holds out {} of {} samples, nothing left to train on",
                self.config.validation,
                data.len()
            )));
        }
        Ok(data.split_at(data.len() - self.config.validation))
    }
}
