//! TOML sweep description.

use std::path::Path;

use dilattn_core::{AttentionConfig, DType, Kernel};
use serde::{Deserialize, Serialize};

use crate::{BenchError, HarnessOptions, Result, MIN_REPEATS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCase {
    pub id: String,
    pub seq_len: usize,
    pub segment_len: usize,
    pub interval: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_kernel")]
    pub kernel: String,
    #[serde(default)]
    pub tile_size: Option<usize>,
}

fn one() -> usize {
    1
}
fn default_head_dim() -> usize {
    64
}
fn default_kernel() -> String {
    "naive".into()
}

impl BenchCase {
    pub fn kernel(&self) -> Result<Kernel> {
        match (self.kernel.as_str(), self.tile_size) {
            ("naive", None) => Ok(Kernel::Naive),
            ("tiled", Some(tile_size)) if tile_size > 0 => Ok(Kernel::Tiled { tile_size }),
            ("tiled", _) => Err(BenchError::Config(format!("`{}`: tiled kernel needs tile_size > 0", self.id))),
            ("naive", Some(_)) => Err(BenchError::Config(format!("`{}`: tile_size given for naive kernel", self.id))),
            (other, _) => Err(BenchError::Config(format!("`{}`: unknown kernel `{other}`", self.id))),
        }
    }

    pub fn attention_config(&self) -> Result<AttentionConfig> {
        Ok(AttentionConfig::new(self.seq_len, self.segment_len, self.interval, self.heads, self.head_dim)?
            .with_kernel(self.kernel()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_batches")]
    pub batch_sizes: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default)]
    pub configs: Vec<BenchCase>,
}

fn default_repeats() -> usize {
    5
}
fn default_batches() -> Vec<usize> {
    vec![1]
}
fn default_dtype() -> DType {
    DType::F32
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats < MIN_REPEATS {
            return Err(BenchError::Config(format!("repeats must be at least {MIN_REPEATS}")));
        }
        if self.workers == 0 || self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(BenchError::Config("workers and batch sizes must be positive".into()));
        }
        for case in &self.configs {
            case.attention_config()?;
        }
        Ok(())
    }

    pub fn harness_options(&self) -> HarnessOptions {
        HarnessOptions {
            repeats: self.repeats,
            workers: self.workers,
            seed: self.seed,
        }
    }
}
