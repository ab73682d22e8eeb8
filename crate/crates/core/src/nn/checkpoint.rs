//! Checkpoint files: one line of JSON header, a newline, then every
//! parameter tensor as little-endian `f64` in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Classifier, ClassifierArch, Parameterized};
use crate::error::{Error, Result};
use crate::io::{read_bytes, sha256_hex, write_atomic};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub arch_tag: String,
    pub arch: serde_json::Value,
    pub shapes: Vec<Vec<usize>>,
    pub seed: u64,
    /// SHA-256 of the parameter blob.
    pub content_hash: String,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    arch_tag: &str,
    arch: &impl Serialize,
    seed: u64,
    params: &[Tensor],
) -> Result<CheckpointHeader> {
    let mut blob = Vec::with_capacity(params.iter().map(|p| p.len() * 8).sum());
    for p in params {
        blob.extend_from_slice(&p.to_le_bytes());
    }
    let header = CheckpointHeader {
        kind: kind.into(),
        arch_tag: arch_tag.into(),
        arch: serde_json::to_value(arch)?,
        shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        seed,
        content_hash: sha256_hex(&blob),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&blob);
    write_atomic(path, &bytes)?;
    Ok(header)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    let bytes = read_bytes(path)?;
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header terminator".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    let blob = &bytes[nl + 1..];
    if sha256_hex(blob) != header.content_hash {
        return Err(bad("content hash mismatch".into()));
    }
    let total: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(bad(format!("blob holds {} bytes, shapes need {}", blob.len(), total * 8)));
    }
    let mut params = Vec::with_capacity(header.shapes.len());
    let mut off = 0;
    for shape in &header.shapes {
        let n: usize = shape.iter().product();
        let data = blob[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push(Tensor::new(shape.clone(), data)?);
        off += 8 * n;
    }
    Ok((header, params))
}

impl Classifier {
    pub fn save(&self, path: &Path) -> Result<CheckpointHeader> {
        save_checkpoint(path, "classifier", &self.arch_tag(), &self.arch, self.seed, self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = load_checkpoint(path)?;
        if header.kind != "classifier" {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("expected a classifier, found `{}`", header.kind),
            });
        }
        let arch: ClassifierArch = serde_json::from_value(header.arch)?;
        Classifier::from_params(arch, header.seed, params)
    }
}
