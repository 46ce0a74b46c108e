//! Dataset directories: one JSON annotation sidecar per image.

use std::path::{Path, PathBuf};

use msfanet::data::{load_annotations, CrowdSample};

use crate::CliError;

/// File names inside a dataset directory that are not sidecars.
pub const RESERVED: &[&str] = &["index.json"];

/// Sidecar paths in a directory, sorted by file name.
pub fn sidecars(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Validation(vec![format!("cannot read dataset directory {}: {e}", dir.display())]))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter(|p| !RESERVED.iter().any(|r| p.file_name().is_some_and(|n| n == *r)))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads every sample; all schema problems are reported together.
pub fn load_dataset(dir: &Path) -> Result<Vec<CrowdSample>, CliError> {
    let mut samples = Vec::new();
    let mut problems = Vec::new();
    for path in sidecars(dir)? {
        match load_annotations(&path) {
            Ok(s) => samples.push(s.sample),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if problems.is_empty() {
        Ok(samples)
    } else {
        Err(CliError::Validation(problems))
    }
}
