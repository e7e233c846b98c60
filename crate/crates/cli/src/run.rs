//! Run directories: one lock holder at a time, every emitted file recorded
//! in `manifest.json` with its SHA-256.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.txt";
const LOCK: &str = ".lock";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
    /// Subcommand that wrote the file.
    pub command: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    /// Keyed by path relative to the run directory, `/`-separated.
    pub files: BTreeMap<String, FileEntry>,
    /// Wall-clock seconds of the latest invocation of each subcommand.
    pub timings: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Self>, CliError> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| CliError::data(p.display(), e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::data(p.display(), e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path, command: &str) -> Result<Self, CliError> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{} pid={}", command, std::process::id())?;
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                Err(CliError::Data(format!(
                    "run directory {} is locked by `{}`; remove {} if that process is gone",
                    dir.display(),
                    holder.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::data(path.display(), e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct RunDir {
    root: PathBuf,
    command: String,
    force: bool,
    started: Instant,
    pub manifest: Manifest,
    _lock: Lock,
}

impl RunDir {
    pub fn open(root: &Path, command: &str, force: bool) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::data(root.display(), e))?;
        let lock = Lock::acquire(root, command)?;
        let manifest = Manifest::load(root)?.unwrap_or_default();
        Ok(Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            force,
            started: Instant::now(),
            manifest,
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Fails unless `--force` when this subcommand already produced output.
    /// With `--force`, its previous files are deleted first so stale
    /// artifacts never outlive a rerun.
    pub fn claim_outputs(&mut self) -> Result<(), CliError> {
        let mine: Vec<String> = self
            .manifest
            .files
            .iter()
            .filter(|(_, e)| e.command == self.command)
            .map(|(k, _)| k.clone())
            .collect();
        if mine.is_empty() {
            return Ok(());
        }
        if !self.force {
            return Err(CliError::Usage(format!(
                "{} already holds `{}` output ({} files, e.g. {}); pass --force to overwrite",
                self.root.display(),
                self.command,
                mine.len(),
                mine[0]
            )));
        }
        for rel in mine {
            let _ = fs::remove_file(self.path(&rel));
            self.manifest.files.remove(&rel);
        }
        Ok(())
    }

    /// Like [`claim_outputs`](Self::claim_outputs) but scoped to `paths`, for
    /// subcommands whose invocations write disjoint files.
    pub fn claim_outputs_matching(&mut self, paths: &[String]) -> Result<(), CliError> {
        for rel in paths {
            if self.manifest.files.contains_key(rel) || self.exists(rel) {
                if !self.force {
                    return Err(CliError::Usage(format!(
                        "{} already exists; pass --force to overwrite",
                        self.path(rel).display()
                    )));
                }
                let _ = fs::remove_file(self.path(rel));
                self.manifest.files.remove(rel);
            }
        }
        Ok(())
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::data(parent.display(), e))?;
        }
        let mut f = File::create(&path).map_err(|e| CliError::data(path.display(), e))?;
        f.write_all(bytes).map_err(|e| CliError::data(path.display(), e))?;
        self.manifest.files.insert(
            rel.to_string(),
            FileEntry {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
                command: self.command.clone(),
            },
        );
        Ok(())
    }

    /// Renders into memory through `f`, then writes and records the bytes.
    pub fn emit<F>(&mut self, rel: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> embsig_core::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(rel, &buf)
    }

    pub fn read(&self, rel: &str, hint: &str) -> Result<Vec<u8>, CliError> {
        let p = self.path(rel);
        fs::read(&p).map_err(|e| CliError::Data(format!("{}: {e} ({hint})", p.display())))
    }

    /// Persists the merged config, timings and the manifest.
    pub fn finish(mut self, cfg: &Config) -> Result<(), CliError> {
        let text = cfg.render();
        self.write(CONFIG, text.as_bytes())?;
        self.manifest.files.get_mut(CONFIG).expect("just written").command = "config".into();
        self.manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
        self.manifest.config_hash = sha256_hex(text.as_bytes());
        self.manifest
            .timings
            .insert(self.command.clone(), self.started.elapsed().as_secs_f64());
        let json = serde_json::to_string_pretty(&self.manifest)?;
        let p = self.path(MANIFEST);
        fs::write(&p, json + "\n").map_err(|e| CliError::data(p.display(), e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::open(dir.path(), "train", false).unwrap();
        assert!(matches!(RunDir::open(dir.path(), "train", false), Err(CliError::Data(_))));
        drop(a);
        RunDir::open(dir.path(), "train", false).unwrap();
    }

    #[test]
    fn manifest_lists_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunDir::open(dir.path(), "gen-task", false).unwrap();
        r.write("data/x.txt", b"abc").unwrap();
        r.finish(&Config::default()).unwrap();
        let m = Manifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(
            m.files["data/x.txt"].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(m.files.contains_key(CONFIG));
        assert!(!dir.path().join(LOCK).exists());

        let mut r = RunDir::open(dir.path(), "gen-task", false).unwrap();
        assert!(matches!(r.claim_outputs(), Err(CliError::Usage(_))));
        let mut r2 = {
            drop(r);
            RunDir::open(dir.path(), "gen-task", true).unwrap()
        };
        r2.claim_outputs().unwrap();
        assert!(!dir.path().join("data/x.txt").exists());
    }
}
