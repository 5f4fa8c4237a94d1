//! The JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, generate_range, load_dataset, GeneratorConfig, SegSample};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::sam::SamConfig;
use crate::train::TrainConfig;

/// Where samples come from: generated from a seed, or loaded from dataset
/// indexes when paths are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub generator: GeneratorConfig,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_val: 200,
            generator: GeneratorConfig::default(),
            train_path: None,
            val_path: None,
        }
    }
}

impl DataConfig {
    /// Generated validation samples continue the training index range, so
    /// the two splits never share a sample seed.
    pub fn load(&self) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
        let train = match &self.train_path {
            Some(p) => load_dataset(p)?,
            None => generate_dataset(self.seed, self.n_train, &self.generator)?,
        };
        let val = match &self.val_path {
            Some(p) => load_dataset(p)?,
            None if self.n_val == 0 => Vec::new(),
            None => generate_range(self.seed, self.n_train, self.n_val, &self.generator)?
                .into_iter()
                .map(|g| g.sample)
                .collect(),
        };
        Ok((train, val))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub sam: SamConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.sam.validate()?;
        self.train.validate()?;
        self.data.generator.validate()?;
        if self.data.train_path.is_none() && self.data.generator.canvas_size != self.sam.mask_size {
            return Err(Error::Config(format!(
                "generated masks are {0}x{0} but sam.mask_size is {1}",
                self.data.generator.canvas_size, self.sam.mask_size
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        // dataset paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train_path, &mut cfg.data.val_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
