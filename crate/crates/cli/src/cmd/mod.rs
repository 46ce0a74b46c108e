pub mod eval;
pub mod prepare;
pub mod synth;
pub mod train;
pub mod visualize;

use std::path::{Path, PathBuf};

use crate::manifest::{resolve_output, ExperimentManifest};
use crate::{CliError, GlobalArgs};

/// Reads `--manifest` if given. Only the parse is checked here; commands
/// validate what they use.
pub fn optional_manifest(g: &GlobalArgs) -> Result<Option<ExperimentManifest>, CliError> {
    g.manifest.as_deref().map(ExperimentManifest::read).transpose()
}

pub fn required_manifest(g: &GlobalArgs, command: &str) -> Result<ExperimentManifest, CliError> {
    optional_manifest(g)?.ok_or_else(|| CliError::Validation(vec![format!("`{command}` needs --manifest")]))
}

/// A flag names the directory itself; the environment root and the manifest
/// output directory get `sub` appended.
pub fn output_dir(flag: Option<&Path>, manifest: Option<&ExperimentManifest>, sub: &str) -> PathBuf {
    match flag {
        Some(f) => f.to_path_buf(),
        None => resolve_output(None, manifest.map(|m| m.paths.output_dir.as_path()), Path::new(".")).join(sub),
    }
}

pub fn data_dir(flag: Option<&Path>, manifest: Option<&ExperimentManifest>) -> Result<PathBuf, CliError> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| manifest.map(|m| m.paths.data_root.clone()))
        .ok_or_else(|| CliError::Validation(vec!["no dataset: pass --data or --manifest".to_owned()]))?;
    if !dir.is_dir() {
        return Err(CliError::Validation(vec![format!("dataset directory does not exist: {}", dir.display())]));
    }
    Ok(dir)
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}
