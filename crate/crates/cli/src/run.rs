//! Run directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{SecondsFormat, Utc};
use log::info;
use mvne::kv::KeyValues;
use sha2::{Digest, Sha256};

use crate::UsageError;

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Content hash over named inputs. Files are keyed by file name, so a moved
/// dataset hashes the same.
#[derive(Default)]
pub struct InputHash {
    hasher: Sha256,
}

impl InputHash {
    pub fn bytes(&mut self, name: &str, data: &[u8]) {
        self.hasher.update((name.len() as u64).to_le_bytes());
        self.hasher.update(name.as_bytes());
        self.hasher.update((data.len() as u64).to_le_bytes());
        self.hasher.update(data);
    }

    pub fn text(&mut self, name: &str, text: &str) {
        self.bytes(name, text.as_bytes());
    }

    /// Hashes the file and returns its own digest.
    pub fn file(&mut self, path: &Path) -> Result<String> {
        let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        self.bytes(name, &data);
        Ok(sha256_hex(&data))
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn absolute(path: &Path) -> String {
    fs::canonicalize(path)
        .unwrap_or_else(|_| path.to_path_buf())
        .display()
        .to_string()
}

/// A run directory holding exactly one `manifest.txt`.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: KeyValues,
}

impl Run {
    /// Creates `out`, or `<root>/<timestamp>-<hash>` when `out` is absent.
    /// An existing manifest in `out` is replaced.
    pub fn create(root: &Path, out: Option<&Path>, command: &str, input_hash: &str) -> Result<Self> {
        let dir = match out {
            Some(d) => d.to_path_buf(),
            None => fresh_dir(root, input_hash),
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut manifest = KeyValues::default();
        manifest.insert("command", command);
        manifest.insert("version", env!("CARGO_PKG_VERSION"));
        manifest.insert("input.hash", input_hash);
        manifest.insert("started", now());
        manifest.insert("status", "running");
        let run = Self { dir, manifest };
        run.save()?;
        info!("run directory {}", run.dir.display());
        Ok(run)
    }

    /// Reopens a run directory whose manifest has the same command and
    /// input hash, or creates it.
    pub fn resume(root: &Path, out: Option<&Path>, command: &str, input_hash: &str) -> Result<Self> {
        let Some(dir) = out else {
            return Self::create(root, None, command, input_hash);
        };
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Self::create(root, Some(dir), command, input_hash);
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let manifest = KeyValues::parse(&text, &path)?;
        if manifest.get("command") != Some(command) || manifest.get("input.hash") != Some(input_hash) {
            bail!(UsageError(format!(
                "{} belongs to a different {} run (inputs or settings changed)",
                dir.display(),
                manifest.get("command").unwrap_or("unknown")
            )));
        }
        let mut run = Self {
            dir: dir.to_path_buf(),
            manifest,
        };
        run.manifest.insert("resumed", now());
        run.manifest.insert("status", "running");
        run.save()?;
        info!("resuming {}", run.dir.display());
        Ok(run)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.manifest.insert(key, value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.manifest.get(key)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records an output file relative to the run directory.
    pub fn output(&mut self, key: &str, name: &str) {
        self.manifest.insert(format!("output.{key}"), name);
    }

    /// Records every entry of `kv` under `prefix.`.
    pub fn snapshot(&mut self, prefix: &str, kv: &KeyValues) {
        for (k, v) in kv.iter() {
            self.manifest.insert(format!("{prefix}.{k}"), v);
        }
    }

    pub fn save(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, self.manifest.to_text()).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.set("finished", now());
        self.set("status", "done");
        self.save()?;
        Ok(self.dir)
    }
}

fn fresh_dir(root: &Path, hash: &str) -> PathBuf {
    let stamp = Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-{}", &hash[..hash.len().min(12)]);
    let mut dir = root.join(&base);
    let mut k = 2;
    while dir.exists() {
        dir = root.join(format!("{base}-{k}"));
        k += 1;
    }
    dir
}

pub fn read_manifest(dir: &Path) -> Result<KeyValues> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(KeyValues::parse(&text, &path)?)
}
