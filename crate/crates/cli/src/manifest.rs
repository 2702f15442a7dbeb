//! Run manifests: everything needed to repeat a run, plus digests of what
//! it read and wrote.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved flags; `mtlfsl <command> <args> --out-dir DIR` repeats
    /// the run.
    pub args: Vec<String>,
    /// Resolved parameters, including values derived from inputs.
    pub parameters: serde_json::Value,
    /// Absolute paths of every file read.
    pub inputs: Vec<FileDigest>,
    /// Output file names relative to the output directory.
    pub outputs: Vec<FileDigest>,
    /// Seconds since the Unix epoch. Not part of the reproducibility
    /// contract.
    pub started_at: u64,
    pub finished_at: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.to_string_lossy().into_owned(),
        sha256: sha256_file(path)?,
    })
}

/// Collects the files a command writes so the manifest can list them.
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `name` through a buffered writer.
    pub fn write<F>(&mut self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let path = self.path(name);
        let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        let mut out = BufWriter::new(file);
        body(&mut out)?;
        out.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |out| {
            serde_json::to_writer_pretty(&mut *out, value)?;
            out.write_all(b"\n")?;
            Ok(())
        })
    }

    /// Digests of everything written so far.
    pub fn digests(&self) -> Result<Vec<FileDigest>> {
        self.written
            .iter()
            .map(|name| {
                Ok(FileDigest {
                    path: name.clone(),
                    sha256: sha256_file(&self.path(name))?,
                })
            })
            .collect()
    }
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{} is not a run manifest", path.display()))
    }
}
