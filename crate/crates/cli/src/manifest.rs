use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use mms_core::model::checkpoint::file_sha256;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE: &str = "run_manifest.json";

/// Written to every output directory before work starts and rewritten with
/// the finish time when the command succeeds.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file; directories hash their sorted listing.
    pub inputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    #[serde(skip)]
    dir: PathBuf,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Hash of a file, or of `name:hash` lines for the files of a directory.
pub fn input_hash(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("{}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        let mut h = Sha256::new();
        for p in entries {
            let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
            h.update(format!("{name}:{}\n", file_sha256(&p)?));
        }
        Ok(format!("{:x}", h.finalize()))
    } else {
        Ok(file_sha256(path)?)
    }
}

impl RunManifest {
    pub fn begin(
        dir: &Path,
        command: &'static str,
        config: impl Serialize,
        seeds: &[(&str, u64)],
        inputs: &[&Path],
    ) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), input_hash(p)?)))
            .collect::<Result<_>>()?;
        let m = Self {
            tool: "mms",
            version: crate::VERSION,
            command,
            config: serde_json::to_value(config)?,
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            inputs,
            started_unix: now(),
            finished_unix: None,
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        let path = self.dir.join(FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished_unix = Some(now());
        self.write()
    }
}
