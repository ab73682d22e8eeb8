//! IDX (MNIST) binary format. Files ending in `.gz` are inflated first.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::io::read_bytes;
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Idx {
        offset,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(offset, format!("truncated header ({} bytes)", bytes.len())))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = read_bytes(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX3 image file into `[N, 1, H, W]` pixels in `[-1, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(idx_err(0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(idx_err(4, format!("degenerate dimensions {n}x{h}x{w}")));
    }
    let need = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(idx_err(
            16 + payload.len(),
            format!("truncated payload: expected {need} pixel bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(idx_err(16 + need, "trailing bytes after image payload"));
    }
    let data = payload.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(idx_err(0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(idx_err(
            8 + payload.len(),
            format!("truncated payload: expected {n} labels, found {}", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(idx_err(8 + n, "trailing bytes after label payload"));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        // the count field of the labels file is where the files disagree
        return Err(idx_err(
            4,
            format!(
                "image count {} does not match label count {}",
                images.shape()[0],
                labels.len()
            ),
        ));
    }
    Dataset::new(images, labels)
}

/// Encodes raw pixel bytes as an IDX3 image file.
pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
