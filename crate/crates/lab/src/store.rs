//! Files on disk: trajectory JSONL, the dataset manifest and model checkpoints.
//! Every I/O error names the path involved.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use forcegain_core::datagen::{ForceAugment, ReturnStats, ScriptedConfig, Trajectory};
use forcegain_core::envsim::{Preset, TaskConfig};
use forcegain_core::seqmodel::{ModelKind, SeqModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Failure, Result};

pub const RAW_FILE: &str = "raw.jsonl";
pub const AUGMENTED_FILE: &str = "augmented.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "forcegain-dataset/1";
pub const CHECKPOINT_FORMAT: &str = "forcegain-checkpoint/1";

fn io_error(action: &str, path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::runtime(format!("cannot {action} {}: {e}", path.display()))
}

/// Write `bytes`, creating parent directories as needed.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_error("create directory", parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_error("write", path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_error("read", path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_jsonl(trajs: &[Trajectory]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in trajs {
        serde_json::to_writer(&mut out, t).expect("trajectory serializes");
        out.push(b'\n');
    }
    out
}

pub fn decode_jsonl<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(bytes).lines().enumerate() {
        let line = line.map_err(|e| io_error("read", path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Failure::runtime(format!("{}:{}: malformed record: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub records: usize,
    pub sha256: String,
}

/// Provenance of a collected dataset. Only `created_at` varies between
/// identical runs.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub preset: Preset,
    pub task: TaskConfig,
    pub episode_seeds: Vec<u64>,
    pub scripted: ScriptedConfig,
    pub augment: ForceAugment,
    pub augment_seed: u64,
    /// Statistics of the raw episodes; absent for an empty collection.
    pub stats: Option<ReturnStats>,
    pub files: Vec<FileEntry>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl Manifest {
    pub fn file(&self, name: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.name == name)
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Trajectories of a dataset directory, after checking them against the manifest.
pub struct LoadedData {
    pub manifest: Manifest,
    pub raw: Vec<Trajectory>,
    pub augmented: Vec<Trajectory>,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedData> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Failure::runtime(format!("dataset manifest not found: {}", mpath.display())));
    }
    let manifest: Manifest = serde_json::from_slice(&read_file(&mpath)?)
        .map_err(|e| Failure::runtime(format!("{}: malformed manifest: {e}", mpath.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Failure::runtime(format!("{}: unsupported format {:?}", mpath.display(), manifest.format)));
    }
    let load = |name: &str| -> Result<Vec<Trajectory>> {
        let path = dir.join(name);
        let entry = manifest
            .file(name)
            .ok_or_else(|| Failure::runtime(format!("{}: no entry for {name}", mpath.display())))?;
        let bytes = read_file(&path)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Failure::runtime(format!("{}: checksum does not match the manifest", path.display())));
        }
        let trajs: Vec<Trajectory> = decode_jsonl(&bytes, &path)?;
        for t in &trajs {
            t.validate().map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        }
        Ok(trajs)
    };
    let raw = load(RAW_FILE)?;
    let augmented = load(AUGMENTED_FILE)?;
    Ok(LoadedData { manifest, raw, augmented })
}

/// A trained model plus what deployment needs besides the weights.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub step: u64,
    /// Default conditioning return for rollouts.
    pub target_return: f64,
    pub model: SeqModel,
}

impl Checkpoint {
    pub fn new(model: SeqModel, step: u64, target_return: f64) -> Self {
        Checkpoint { format: CHECKPOINT_FORMAT.into(), step, target_return, model }
    }
}

pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = serde_json::to_vec(ckpt).expect("checkpoint serializes");
    write_file(path, &bytes)
}

pub fn load_checkpoint(path: &Path, kind: ModelKind) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Failure::runtime(format!("checkpoint not found: {}", path.display())));
    }
    let ckpt: Checkpoint = serde_json::from_slice(&read_file(path)?)
        .map_err(|e| Failure::runtime(format!("{}: malformed checkpoint: {e}", path.display())))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Failure::runtime(format!("{}: unsupported format {:?}", path.display(), ckpt.format)));
    }
    if ckpt.model.kind() != kind {
        return Err(Failure::runtime(format!(
            "{}: expected a {} model, found {}",
            path.display(),
            kind.name(),
            ckpt.model.kind().name()
        )));
    }
    Ok(ckpt)
}
