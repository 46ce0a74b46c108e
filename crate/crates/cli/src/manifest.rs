//! Experiment manifest: one TOML file holding every setting that affects results.

use std::path::{Path, PathBuf};

use msfanet::data::AugmentationConfig;
use msfanet::eval::EvalOptions;
use msfanet::model::ModelConfig;
use msfanet::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "MSFANET_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub version: u32,
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelConfig,
    /// Includes the loss settings as `[train.loss]`.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub eval: EvalOptions,
}

impl ExperimentManifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(vec![format!("cannot read manifest {}: {e}", path.display())]))?;
        Self::parse(&text).map_err(|e| CliError::Validation(vec![format!("{}: {e}", path.display())]))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.version != MANIFEST_VERSION {
            problems.push(format!("unsupported manifest version {} (expected {MANIFEST_VERSION})", self.version));
        }
        if !self.paths.data_root.is_dir() {
            problems.push(format!("paths.data_root does not exist: {}", self.paths.data_root.display()));
        }
        if let Some(p) = &self.paths.pretrained {
            if !p.is_file() {
                problems.push(format!("paths.pretrained does not exist: {}", p.display()));
            }
        }
        problems.extend(self.model.validate());
        problems.extend(self.train.validate());
        problems.extend(self.augmentation.validate());
        problems.extend(self.eval.bands.validate());
        problems
    }
}

/// Output root precedence: flag, then environment, then manifest (or `fallback`).
pub fn resolve_output(flag: Option<&Path>, manifest: Option<&Path>, fallback: &Path) -> PathBuf {
    if let Some(f) = flag {
        return f.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    manifest.unwrap_or(fallback).to_path_buf()
}
