//! Ground-truth generation with content-hash idempotency.

use std::collections::BTreeMap;
use std::path::Path;

use msfanet::data::{ground_truth_at_scale, load_annotations, write_raw, Sidecar, DEFAULT_SIGMA};
use msfanet::model::OUTPUT_STRIDE;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{create_dir, data_dir, optional_manifest, output_dir, write_file};
use crate::dataset::sidecars;
use crate::{CliError, GlobalArgs, PrepareArgs};

/// Bumped whenever the GT rendering changes, invalidating old hashes.
const GT_FORMAT: &str = "msfanet-gt-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub hash: String,
    pub file: String,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub sum: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GtIndex {
    pub sigma: f64,
    pub scale: usize,
    pub entries: Vec<IndexEntry>,
}

fn content_hash(sidecar: &[u8], image: &[u8], sigma: f64) -> String {
    let mut h = Sha256::new();
    h.update(GT_FORMAT.as_bytes());
    h.update(sigma.to_le_bytes());
    h.update((sidecar.len() as u64).to_le_bytes());
    h.update(sidecar);
    h.update(image);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))
}

pub fn run(g: &GlobalArgs, a: &PrepareArgs) -> Result<(), CliError> {
    let manifest = optional_manifest(g)?;
    let data = data_dir(a.data.as_deref(), manifest.as_ref())?;
    let sigma = a.sigma.or(manifest.as_ref().map(|m| m.train.sigma)).unwrap_or(DEFAULT_SIGMA);
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CliError::Validation(vec![format!("sigma must be > 0, got {sigma}")]));
    }
    let out = output_dir(a.out.as_deref(), manifest.as_ref(), "gt");
    let files = sidecars(&data)?;
    if g.dry_run {
        println!("data = {}\nout = {}\nsigma = {sigma}\nsamples = {}", data.display(), out.display(), files.len());
        return Ok(());
    }
    create_dir(&out)?;
    let index_path = out.join("index.json");
    let previous: BTreeMap<String, IndexEntry> = std::fs::read_to_string(&index_path)
        .ok()
        .and_then(|t| serde_json::from_str::<GtIndex>(&t).ok())
        .map(|i| i.entries.into_iter().map(|e| (e.id.clone(), e)).collect())
        .unwrap_or_default();

    let mut index = GtIndex {
        sigma,
        scale: OUTPUT_STRIDE,
        entries: Vec::new(),
    };
    let (mut written, mut skipped) = (0, 0);
    let mut problems = Vec::new();
    for path in &files {
        let outcome = (|| -> Result<(IndexEntry, bool), String> {
            let text = read(path)?;
            let sidecar = Sidecar::parse(path, &String::from_utf8_lossy(&text)).map_err(|e| e.to_string())?;
            let image = read(&sidecar.image_path(path))?;
            let hash = content_hash(&text, &image, sigma);
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            if let Some(prev) = previous.get(&id) {
                if prev.hash == hash && out.join(&prev.file).is_file() {
                    return Ok((prev.clone(), false));
                }
            }
            let loaded = load_annotations(path).map_err(|e| e.to_string())?;
            let gt = ground_truth_at_scale(&loaded.sample.annotations, sigma, OUTPUT_STRIDE).map_err(|e| e.to_string())?;
            let file = format!("{id}.f32");
            write_raw(&gt, &out.join(&file)).map_err(|e| e.to_string())?;
            Ok((
                IndexEntry {
                    id,
                    hash,
                    file,
                    height: gt.height,
                    width: gt.width,
                    count: loaded.sample.count(),
                    sum: gt.sum(),
                },
                true,
            ))
        })();
        match outcome {
            Ok((entry, fresh)) => {
                if fresh {
                    written += 1;
                } else {
                    skipped += 1;
                }
                index.entries.push(entry);
            }
            Err(e) => problems.push(e),
        }
    }
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    if std::fs::read_to_string(&index_path).ok().as_deref() != Some(text.as_str()) {
        write_file(&index_path, &text)?;
    }
    println!("prepared {written}, up to date {skipped}, failed {}", problems.len());
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(problems))
    }
}
