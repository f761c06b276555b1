//! Stage directories under an output root.
//!
//! A stage is built in `.partial/` and renamed into place only once its
//! `stage.json` (key, input keys, file hashes) is written; the root
//! `manifest.json` lists finalized stages and their keys.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};

use hardcase::corpus::sha256_hex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const STAGE_FILE: &str = "stage.json";
pub const MANIFEST_FILE: &str = "manifest.json";
const PARTIAL_DIR: &str = ".partial";

pub type Inputs = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub inputs: Inputs,
    /// Relative path to SHA-256 of every file in the stage.
    pub files: BTreeMap<String, String>,
}

/// Hash of what a stage is built from: its name, its parameters and the
/// keys of the stages it reads.
pub fn stage_key(stage: &str, params: &impl Serialize, inputs: &Inputs) -> Result<String> {
    let v = serde_json::json!({ "stage": stage, "params": params, "inputs": inputs });
    Ok(sha256_hex(&serde_json::to_vec(&v)?))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    io::copy(&mut File::open(path)?, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
    force: bool,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, force: bool) -> Self {
        Self { root: root.into(), force }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn manifest(&self) -> Result<BTreeMap<String, String>> {
        match fs::read_to_string(self.root.join(MANIFEST_FILE)) {
            Ok(s) => Ok(serde_json::from_str(&s)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(BTreeMap::new()),
            Err(e) => Err(e.into()),
        }
    }

    fn register(&self, stage: &str, key: &str) -> Result<()> {
        let mut m = self.manifest()?;
        m.insert(stage.to_string(), key.to_string());
        write_atomic(&self.root.join(MANIFEST_FILE), (serde_json::to_string_pretty(&m)? + "\n").as_bytes())
    }

    /// Starts a stage. Fails if a finalized stage is present and `force`
    /// is off.
    pub fn begin(&self, stage: &str) -> Result<Pending> {
        let target = self.dir(stage);
        if target.exists() && !self.force {
            return Err(CliError::Exists(target.display().to_string()));
        }
        let partial = self.root.join(PARTIAL_DIR).join(stage.replace('/', "__"));
        if partial.exists() {
            fs::remove_dir_all(&partial)?;
        }
        fs::create_dir_all(&partial)?;
        Ok(Pending { ws: self.clone(), stage: stage.to_string(), dir: partial, done: false })
    }

    /// Opens a finalized stage built with `key`.
    pub fn load(&self, stage: &str, key: &str) -> Result<Artifact> {
        let dir = self.dir(stage);
        let text = match fs::read_to_string(dir.join(STAGE_FILE)) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(CliError::Missing(format!("{stage} (run that stage first)")));
            }
            Err(e) => return Err(e.into()),
        };
        let record: StageRecord = serde_json::from_str(&text)?;
        if record.key != key {
            return Err(CliError::Stale(format!("{stage} was built from a different config or inputs (rerun it with --force)")));
        }
        Ok(Artifact { dir, record })
    }
}

/// A stage under construction; dropped unfinished, it leaves nothing behind.
#[derive(Debug)]
pub struct Pending {
    ws: Workspace,
    stage: String,
    dir: PathBuf,
    done: bool,
}

impl Pending {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        fs::write(self.path(name), serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    pub fn finish(mut self, key: &str, inputs: Inputs) -> Result<StageRecord> {
        let mut files = BTreeMap::new();
        hash_tree(&self.dir, &self.dir, &mut files)?;
        let record = StageRecord { stage: self.stage.clone(), key: key.to_string(), inputs, files };
        fs::write(self.dir.join(STAGE_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
        let target = self.ws.dir(&self.stage);
        if target.exists() {
            fs::remove_dir_all(&target)?;
        }
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::rename(&self.dir, &target)?;
        self.done = true;
        self.ws.register(&self.stage, key)?;
        Ok(record)
    }
}

impl Drop for Pending {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn hash_tree(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            hash_tree(base, &p, out)?;
        } else {
            let rel = p.strip_prefix(base).expect("inside base");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if rel != STAGE_FILE {
                out.insert(rel, file_sha256(&p)?);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Artifact {
    pub dir: PathBuf,
    pub record: StageRecord,
}

impl Artifact {
    /// Path of a recorded file after checking its content hash.
    pub fn file(&self, name: &str) -> Result<PathBuf> {
        let want = self
            .record
            .files
            .get(name)
            .ok_or_else(|| CliError::Missing(format!("{} has no {name}", self.record.stage)))?;
        let p = self.dir.join(name);
        if &file_sha256(&p)? != want {
            return Err(CliError::Stale(format!("{} was modified after it was written", p.display())));
        }
        Ok(p)
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        Ok(serde_json::from_str(&fs::read_to_string(self.file(name)?)?)?)
    }
}
