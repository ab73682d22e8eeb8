use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{file_sha256, read_bytes, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// One completed unit of work. Paths are relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    /// Hash of the stage's config subtree, seed and input hashes.
    pub key: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageEntry>,
}

impl Manifest {
    pub fn load_or_default(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_slice(&read_bytes(&path)?)?)
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&out_dir.join(MANIFEST_FILE), &bytes)
    }

    /// True when `name` was recorded under `key` and every output still
    /// hashes to its recorded value.
    pub fn is_fresh(&self, out_dir: &Path, name: &str, key: &str) -> bool {
        match self.stages.get(name) {
            Some(e) if e.key == key => e
                .outputs
                .iter()
                .all(|(rel, h)| file_sha256(&out_dir.join(rel)).is_ok_and(|x| &x == h)),
            _ => false,
        }
    }

    /// Checks that every file under `out_dir` except the manifest and the
    /// timings sidecar belongs to exactly one entry with a matching hash.
    pub fn verify_complete(&self, out_dir: &Path) -> Result<()> {
        let mut owners: BTreeMap<&str, &str> = BTreeMap::new();
        for (stage, e) in &self.stages {
            for (rel, h) in &e.outputs {
                if let Some(prev) = owners.insert(rel, stage) {
                    return Err(Error::invalid(format!("{rel} claimed by both {prev} and {stage}")));
                }
                let actual = file_sha256(&out_dir.join(rel))?;
                if &actual != h {
                    return Err(Error::invalid(format!("{rel} hash changed since stage {stage}")));
                }
            }
        }
        for rel in list_files(out_dir)? {
            if rel != MANIFEST_FILE && rel != TIMINGS_FILE && !owners.contains_key(rel.as_str()) {
                return Err(Error::invalid(format!("{rel} is not recorded in the manifest")));
            }
        }
        Ok(())
    }
}

/// All regular files below `root`, as sorted `/`-separated relative paths.
pub fn list_files(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("below root");
                let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(parts.join("/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub seconds: BTreeMap<String, f64>,
}

impl Timings {
    pub fn load_or_default(out_dir: &Path) -> Self {
        read_bytes(&out_dir.join(TIMINGS_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        write_atomic(&out_dir.join(TIMINGS_FILE), &serde_json::to_vec_pretty(self)?)
    }
}
