use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::QuantConfig;
use super::matrix::{quantize_matrix, QuantizedMatrix};
use crate::error::{Error, Result};
use crate::hessian::HessianData;
use crate::tensor::{load_npy, TensorF32};

/// One layer of a model manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub weight: PathBuf,
    pub hessian: PathBuf,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for e in &mut entries {
        if e.weight.is_relative() {
            e.weight = base.join(&e.weight);
        }
        if e.hessian.is_relative() {
            e.hessian = base.join(&e.hessian);
        }
    }
    Ok(entries)
}

/// Result for one manifest entry; failures keep the entry's name.
#[derive(Debug)]
pub struct LayerOutcome {
    pub name: String,
    pub result: Result<QuantizedMatrix>,
}

/// Quantizes every entry independently on at most `workers` threads.
/// Outcomes come back in manifest order and one failure does not stop the rest.
pub fn quantize_model(
    manifest: &[ManifestEntry],
    cfg: &QuantConfig,
    workers: usize,
) -> Result<Vec<LayerOutcome>> {
    run_pool(workers, || {
        manifest
            .par_iter()
            .map(|e| LayerOutcome {
                name: e.name.clone(),
                result: quantize_entry(e, cfg),
            })
            .collect()
    })
}

fn quantize_entry(e: &ManifestEntry, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    let w = load_npy(&e.weight)?;
    let hd = HessianData::from_tensor(&load_npy(&e.hessian)?)?;
    quantize_matrix(&w, &hd, cfg)
}

/// In-memory counterpart of [`quantize_model`].
pub fn quantize_layers(
    layers: &[(String, TensorF32, HessianData)],
    cfg: &QuantConfig,
    workers: usize,
) -> Result<Vec<LayerOutcome>> {
    run_pool(workers, || {
        layers
            .par_iter()
            .map(|(name, w, hd)| LayerOutcome {
                name: name.clone(),
                result: quantize_matrix(w, hd, cfg),
            })
            .collect()
    })
}

fn run_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Err(Error::InvalidOptions("workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidOptions(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
