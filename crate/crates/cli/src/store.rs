//! Content-addressed stage cache and run manifests.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Hex sha256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Short key of `kind` plus the JSON of everything the stage depends on.
pub fn stage_key<T: Serialize + ?Sized>(kind: &str, inputs: &T) -> String {
    let json = serde_json::to_vec(inputs).expect("stage inputs serialize");
    format!("{kind}-{}", hex::encode(&Sha256::digest(json)[..8]))
}

/// Writes through a sibling temporary path so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

/// Directory of cached stage outputs, shared by every run that points at it.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Store {
            root: root.into(),
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    /// Loads the artifact at `key`, or builds it with `make` and loads it.
    ///
    /// `make` writes into a scratch path that is renamed onto the key's path
    /// only on success. Concurrent callers with the same key serialize.
    /// Returns the value and whether it came from the cache.
    pub fn get_or_make<T>(
        &self,
        key: &str,
        load: impl Fn(&Path) -> Result<T>,
        make: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<(T, bool)> {
        let lock = {
            let mut map = self.locks.lock().expect("store lock poisoned");
            map.entry(key.to_string()).or_default().clone()
        };
        let _guard = lock.lock().expect("stage lock poisoned");
        let path = self.path(key);
        if path.exists() {
            match load(&path) {
                Ok(v) => return Ok((v, true)),
                Err(e) => {
                    log::warn!("discarding unreadable cache entry {}: {e:#}", path.display());
                    remove_path(&path)?;
                }
            }
        }
        fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        let scratch = self.root.join(format!("{key}.partial"));
        remove_path(&scratch)?;
        make(&scratch)?;
        fs::rename(&scratch, &path).with_context(|| format!("publishing {}", path.display()))?;
        Ok((load(&path)?, false))
    }
}

fn remove_path(path: &Path) -> Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path).with_context(|| format!("removing {}", path.display()))?;
    } else if path.exists() {
        fs::remove_file(path).with_context(|| format!("removing {}", path.display()))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: Option<String>,
    pub cached: bool,
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "FAILED")]
    Failed,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: RunStatus,
    pub seed: u64,
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

impl Manifest {
    pub fn new(seed: u64, config_sha256: String) -> Self {
        Manifest {
            status: RunStatus::Ok,
            seed,
            config_sha256,
            stages: Vec::new(),
            failed_stage: None,
            error: None,
        }
    }

    /// Records a stage with the hashes of its files; directories contribute
    /// every file inside them, in name order.
    pub fn record(&mut self, name: &str, key: Option<&str>, cached: bool, paths: &[PathBuf]) -> Result<()> {
        let mut artifacts = Vec::new();
        for p in paths {
            for file in files_under(p)? {
                artifacts.push(Artifact {
                    sha256: file_sha256(&file)?,
                    path: file,
                });
            }
        }
        self.stages.push(StageRecord {
            name: name.to_string(),
            key: key.map(str::to_string),
            cached,
            artifacts,
        });
        Ok(())
    }

    pub fn fail(&mut self, stage: &str, err: &anyhow::Error) {
        self.status = RunStatus::Failed;
        self.failed_stage = Some(stage.to_string());
        self.error = Some(format!("{err:#}"));
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&run_dir.join("manifest.json"), &json)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("manifest.json");
        let raw = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&raw).with_context(|| format!("parsing {}", path.display()))
    }
}

fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    let mut out = Vec::new();
    for e in entries {
        out.extend(files_under(&e)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_request_hits_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let load = |p: &Path| Ok(fs::read_to_string(p)?);
        let (v, cached) = store.get_or_make("a-1", load, |p| Ok(fs::write(p, "x")?)).unwrap();
        assert_eq!((v.as_str(), cached), ("x", false));
        let (v, cached) = store
            .get_or_make("a-1", load, |_| panic!("must not rebuild"))
            .unwrap();
        assert_eq!((v.as_str(), cached), ("x", true));
    }

    #[test]
    fn failed_build_leaves_no_entry() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let r = store.get_or_make("b-1", |p| Ok(fs::read(p)?), |p| {
            fs::write(p, "half")?;
            anyhow::bail!("boom")
        });
        assert!(r.is_err());
        assert!(!store.path("b-1").exists());
    }

    #[test]
    fn keys_depend_on_inputs() {
        assert_eq!(stage_key("t", &(1, "a")), stage_key("t", &(1, "a")));
        assert_ne!(stage_key("t", &(1, "a")), stage_key("t", &(2, "a")));
    }
}
