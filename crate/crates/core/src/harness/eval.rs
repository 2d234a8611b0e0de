use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{check_shapes, score};
use super::{RunConfig, RunPaths};
use crate::backbone::SegmentationModel;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, gate_stats, EvalReport, GateStats};
use crate::synthdata::{load_examples, write_json, DatasetManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub gate_stats: GateStats,
    /// SHA-256 over the sorted `(sample_id, file hash)` pairs.
    pub prompt_hash: String,
    pub prompt_files: BTreeMap<String, String>,
    pub temperature: f64,
    pub run_dir: PathBuf,
}

/// Hashes every prompt file named by the manifest; a missing file is an
/// error naming its sample.
pub fn prompt_hash(manifest_path: &Path) -> Result<(String, BTreeMap<String, String>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut files = BTreeMap::new();
    for e in &manifest.entries {
        let path = root.join(&e.prompt_path);
        let bytes = fs::read(&path).map_err(|_| {
            Error::InvalidInput(format!(
                "{}: prompt file {} is missing",
                e.sample_id,
                path.display()
            ))
        })?;
        files.insert(e.sample_id.clone(), hex::encode(Sha256::digest(&bytes)));
    }
    let mut all = Sha256::new();
    for (id, h) in &files {
        all.update(id.as_bytes());
        all.update(b":");
        all.update(h.as_bytes());
        all.update(b"\n");
    }
    Ok((hex::encode(all.finalize()), files))
}

/// Fails unless both evaluations used byte-identical prompt files.
pub fn verify_same_prompts(a: &EvalOutput, b: &EvalOutput) -> Result<()> {
    if a.prompt_hash == b.prompt_hash {
        return Ok(());
    }
    let differing: Vec<&str> = a
        .prompt_files
        .iter()
        .filter(|(id, h)| b.prompt_files.get(*id) != Some(*h))
        .map(|(id, _)| id.as_str())
        .collect();
    Err(Error::InvalidInput(format!(
        "prompt sets differ between {} and {} (samples: {})",
        a.run_dir.display(),
        b.run_dir.display(),
        if differing.is_empty() { "extra entries".to_string() } else { differing.join(", ") }
    )))
}

/// Loads the run's checkpoint, scores the test manifest in eval mode (hard
/// gates, no noise) and writes `eval.json` into the run directory.
pub fn evaluate(run_dir: &Path, manifest: Option<&Path>, threshold: Option<f64>) -> Result<EvalOutput> {
    let paths = RunPaths::new(run_dir);
    let (saved, config) = checkpoint::load(&paths.checkpoint_bin(), &paths.checkpoint_index())?;
    let cfg: RunConfig = serde_json::from_value(config)
        .map_err(|e| Error::json(paths.checkpoint_index(), e))?;
    let (model, mut store) = SegmentationModel::new(cfg.model.clone(), cfg.seed)?;
    store.load_from(&saved)?;
    let manifest = manifest.map_or_else(|| cfg.test_manifest.clone(), Path::to_path_buf);
    let threshold = threshold.unwrap_or(cfg.threshold);
    let (hash, files) = prompt_hash(&manifest)?;
    let (_, examples) = load_examples(&manifest)?;
    if examples.is_empty() {
        return Err(Error::InvalidInput(format!("{}: empty test set", manifest.display())));
    }
    check_shapes(&examples, &cfg)?;
    let temperature = cfg.gate_temperature.end;
    let (scores, records) = score(&model, &store, &examples, temperature, threshold)?;
    let out = EvalOutput {
        report: aggregate(scores, threshold)?,
        gate_stats: gate_stats(&records),
        prompt_hash: hash,
        prompt_files: files,
        temperature,
        run_dir: run_dir.to_path_buf(),
    };
    write_json(&paths.eval(), &out)?;
    Ok(out)
}

impl EvalOutput {
    pub fn load(path: &Path) -> Result<Self> {
        crate::synthdata::read_json(path)
    }
}
