//! Run and evaluation manifests: every artifact a report cites is referenced
//! by path plus content hash, so reports never recompute metrics and stale
//! or corrupted files are caught at report time.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use icewater::infer::InferenceMode;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn hash_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// A file referenced from a manifest: path relative to the manifest's
/// directory plus its content hash at write time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRef {
    pub fn create(base: &Path, relative: impl Into<PathBuf>) -> anyhow::Result<FileRef> {
        let relative = relative.into();
        Ok(FileRef {
            sha256: hash_file(&base.join(&relative))?,
            path: relative,
        })
    }

    /// Verify the file still exists and hashes identically.
    pub fn verify(&self, base: &Path) -> anyhow::Result<PathBuf> {
        let full = base.join(&self.path);
        let now = hash_file(&full)?;
        anyhow::ensure!(
            now == self.sha256,
            "{} changed since it was recorded (expected {}, found {now})",
            full.display(),
            self.sha256
        );
        Ok(full)
    }
}

/// Everything needed to replay or audit one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub strategy: String,
    pub seed: u64,
    pub run_index: usize,
    pub config: crate::config::PipelineConfig,
    pub experiment_digest: String,
    pub split_manifest: FileRef,
    pub patch_manifest: FileRef,
    pub checkpoint: FileRef,
    pub checkpoint_sidecar: FileRef,
    pub epoch_log: FileRef,
    pub epochs_trained: u32,
    pub best_epoch: u32,
    pub best_val_loss: f64,
    pub started: String,
    pub finished: String,
    pub version: String,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> anyhow::Result<RunManifest> {
        let path = dir.join("run.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Index of the runs a `train` invocation produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub strategies: Vec<String>,
    pub n_runs: usize,
    pub base_seed: u64,
    pub run_dirs: Vec<PathBuf>,
    pub failures: Vec<String>,
    pub complete: bool,
}

impl ExperimentManifest {
    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("experiment.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> anyhow::Result<ExperimentManifest> {
        let path = dir.join("experiment.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One checkpoint x scene evaluation row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub run_name: String,
    pub strategy: String,
    pub seed: u64,
    pub experiment_digest: String,
    pub scene_id: String,
    pub metrics: FileRef,
    pub confusion_csv: FileRef,
    pub class_map: FileRef,
    pub errors_tif: FileRef,
    pub errors_png: FileRef,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationManifest {
    pub mode: InferenceMode,
    pub rows: Vec<EvalRow>,
}

impl EvaluationManifest {
    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("evaluate.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> anyhow::Result<EvaluationManifest> {
        let path = dir.join("evaluate.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Exclusive lock on an output directory; removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> anyhow::Result<DirLock> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".icewater.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => anyhow::bail!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("locking {}", dir.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_ref_detects_change() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), b"hello").unwrap();
        let fr = FileRef::create(dir.path(), "a.txt").unwrap();
        fr.verify(dir.path()).unwrap();
        std::fs::write(dir.path().join("a.txt"), b"changed").unwrap();
        assert!(fr.verify(dir.path()).is_err());
    }

    #[test]
    fn dir_lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        let _relock = DirLock::acquire(dir.path()).unwrap();
    }
}
