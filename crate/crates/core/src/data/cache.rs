//! Flat binary dataset cache with a JSON sidecar.
//!
//! `<stem>.bin` holds the pixels as little-endian `f64` followed by the labels
//! as little-endian `u64`; `<stem>.json` carries shape, class set,
//! normalization tag and the SHA-256 of the `.bin` file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::io::{read_bytes, sha256_hex, write_atomic};
use crate::tensor::Tensor;

pub const NORMALIZATION_TAG: &str = "minus_one_to_one";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub shape: Vec<usize>,
    pub class_set: BTreeSet<usize>,
    pub normalization: String,
    pub content_hash: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes the cache pair and returns the paths written (`.bin`, `.json`).
pub fn write_cache(dataset: &Dataset, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let (bin, json) = paths(stem);
    let mut bytes = dataset.images().to_le_bytes();
    for &l in dataset.labels() {
        bytes.extend_from_slice(&(l as u64).to_le_bytes());
    }
    let header = CacheHeader {
        shape: dataset.images().shape().to_vec(),
        class_set: dataset.class_set().clone(),
        normalization: NORMALIZATION_TAG.into(),
        content_hash: sha256_hex(&bytes),
    };
    write_atomic(&bin, &bytes)?;
    write_atomic(&json, serde_json::to_string_pretty(&header)?.as_bytes())?;
    Ok((bin, json))
}

pub fn read_cache(stem: &Path) -> Result<Dataset> {
    let (bin, json) = paths(stem);
    let header: CacheHeader = serde_json::from_slice(&read_bytes(&json)?)?;
    let bytes = read_bytes(&bin)?;
    let bad = |reason: String| Error::Checkpoint {
        path: bin.clone(),
        reason,
    };
    if sha256_hex(&bytes) != header.content_hash {
        return Err(bad("content hash mismatch".into()));
    }
    if header.normalization != NORMALIZATION_TAG {
        return Err(bad(format!("unknown normalization {}", header.normalization)));
    }
    let numel: usize = header.shape.iter().product();
    let n = *header.shape.first().ok_or_else(|| bad("empty shape".into()))?;
    if bytes.len() != 8 * (numel + n) {
        return Err(bad(format!("expected {} bytes, found {}", 8 * (numel + n), bytes.len())));
    }
    let (px, lb) = bytes.split_at(8 * numel);
    let data = px
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let labels = lb
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
        .collect();
    let ds = Dataset::new(Tensor::new(header.shape, data)?, labels)?;
    if ds.class_set() != &header.class_set {
        return Err(bad("class set disagrees with labels".into()));
    }
    Ok(ds)
}
