use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use icewater::fixture::CatalogFile;
use icewater::ingest::{ingest_catalog, IngestReport};
use icewater::sampler::PatchSet;
use icewater::scene::{DatasetSplit, Scene};

use crate::config::PipelineConfig;
use crate::manifest::FileRef;
use crate::{Classify, CliResult};

pub mod evaluate;
pub mod fixture;
pub mod predict;
pub mod prepare;
pub mod report;
pub mod train;

pub const DATA_ROOT_ENV: &str = "ICEWATER_DATA_ROOT";

/// Global flags shared by every command.
pub struct Ctx {
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
}

impl Ctx {
    pub fn out_dir(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| crate::usage_error("--out is required for this command"))
    }

    pub fn timestamp(&self) -> String {
        if self.deterministic {
            "1970-01-01T00:00:00Z".to_string()
        } else {
            // RFC3339 from the system clock, seconds precision.
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            format_epoch_seconds(now)
        }
    }
}

fn format_epoch_seconds(secs: u64) -> String {
    // Civil-from-days conversion (Howard Hinnant's algorithm).
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    format!(
        "{y:04}-{m:02}-{d:02}T{:02}:{:02}:{:02}Z",
        rem / 3600,
        (rem % 3600) / 60,
        rem % 60
    )
}

/// What `prepare` leaves behind for the rest of the pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrepareManifest {
    pub data_root: PathBuf,
    pub seed: u64,
    pub config: PipelineConfig,
    pub split_manifest: FileRef,
    pub patch_manifest: FileRef,
    pub ingest_report: FileRef,
    pub warnings: Vec<String>,
    pub version: String,
}

impl PrepareManifest {
    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("prepare.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> anyhow::Result<PrepareManifest> {
        let path = dir.join("prepare.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IngestReportFile {
    pub scenes: Vec<IngestReport>,
    pub warnings: Vec<String>,
}

pub fn resolve_data_root(flag: Option<PathBuf>, recorded: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(root) = flag {
        return Ok(root);
    }
    if let Ok(env_root) = std::env::var(DATA_ROOT_ENV) {
        return Ok(PathBuf::from(env_root));
    }
    recorded
        .map(Path::to_path_buf)
        .ok_or_else(|| crate::usage_error("no dataset root: pass --data or set ICEWATER_DATA_ROOT"))
}

/// Load the manifests written by `prepare`.
pub struct Prepared {
    pub manifest: PrepareManifest,
    pub split: DatasetSplit,
    pub patch_set: PatchSet,
}

pub fn load_prepared(dir: &Path) -> CliResult<Prepared> {
    let manifest = PrepareManifest::load(dir).data()?;
    let split_path = manifest.split_manifest.verify(dir).data()?;
    let split: DatasetSplit =
        serde_json::from_str(&std::fs::read_to_string(&split_path).data()?).data()?;
    let patch_path = manifest.patch_manifest.verify(dir).data()?;
    let patch_set: PatchSet =
        serde_json::from_str(&std::fs::read_to_string(&patch_path).data()?).data()?;
    Ok(Prepared {
        manifest,
        split,
        patch_set,
    })
}

/// Ingest the subset of cataloged scenes named by `only` (or all of them).
pub fn load_scenes(
    data_root: &Path,
    only: Option<&BTreeSet<String>>,
) -> CliResult<(std::collections::BTreeMap<String, Scene>, Vec<IngestReport>)> {
    let catalog = CatalogFile::load(data_root).data()?;
    ingest_catalog(data_root, &catalog, only).data()
}
