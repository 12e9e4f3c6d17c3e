//! Run configuration: one TOML file covering every command, with flag
//! overrides applied on top. The resolved result is written next to each
//! command's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gait_core::dataset::DatasetSpec;
use gait_core::kid::FeatureExtractorSpec;
use gait_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KidConfig {
    pub block_size: usize,
    pub n_blocks: usize,
    pub seed: u64,
    pub extractor: FeatureExtractorSpec,
}

impl Default for KidConfig {
    fn default() -> Self {
        KidConfig {
            block_size: 50,
            n_blocks: 100,
            seed: 0,
            extractor: FeatureExtractorSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset root holding `S/` and `T/`.
    pub data: PathBuf,
    /// Training output directory.
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            run: "run".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub kid: KidConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The dataset and the networks share one image size.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.image_size != self.train.image_size() {
            bail!(
                "dataset.image_size ({}) differs from train.generator.image_size ({})",
                self.dataset.image_size,
                self.train.image_size()
            );
        }
        Ok(())
    }

    pub fn set_image_size(&mut self, size: usize) {
        self.dataset.image_size = size;
        self.train.generator.image_size = size;
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, toml::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
