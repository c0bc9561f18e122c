//! Run artifacts on disk. Every file is written to a temporary sibling and
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use supportbench_core::RunManifest;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_REPORT_FILE: &str = "run_report.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.txt";
pub const CURVES_DIR: &str = "curves";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("cannot create a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// On-disk manifest: the manifest plus its own digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub digest: String,
    pub manifest: RunManifest,
}

impl ManifestFile {
    pub fn new(manifest: RunManifest) -> Self {
        Self {
            digest: manifest.digest(),
            manifest,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifests always serialize");
        out.push(b'\n');
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        let file: ManifestFile = serde_json::from_slice(&bytes)
            .with_context(|| format!("malformed manifest {}", path.display()))?;
        let actual = file.manifest.digest();
        if actual != file.digest {
            bail!(
                "manifest {} claims digest {} but its contents hash to {actual}",
                path.display(),
                file.digest
            );
        }
        Ok(file)
    }
}
