use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

/// Percent accuracy: mean ± population std over groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub per_group: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub mode: String,
    pub variant: String,
    pub latent: String,
    pub top1: Stat,
    pub top5: Stat,
    pub per_class_top1: BTreeMap<usize, f64>,
    pub knn_dist: f64,
    /// Filled in once the overfitting analysis has run.
    pub overfit_fraction: Option<f64>,
    pub overfit_tau_low: Option<f64>,
    pub overfit_tau_high: Option<f64>,
    pub n_reconstructions: usize,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

impl AttackReport {
    pub fn check(&self) -> Result<()> {
        let in_range = |s: &Stat| (0.0..=100.0).contains(&s.mean);
        if !in_range(&self.top1) || !in_range(&self.top5) || self.top5.mean < self.top1.mean || self.knn_dist < 0.0 {
            return Err(Error::invalid(format!(
                "inconsistent report: top1 {} top5 {} knn {}",
                self.top1.mean, self.top5.mean, self.knn_dist
            )));
        }
        Ok(())
    }
}

fn to_bytes(image: &[f64]) -> Vec<u8> {
    image.iter().map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).collect()
}

fn encode_pnm(channels: usize, h: usize, w: usize, planar: &[f64]) -> Result<Vec<u8>> {
    let (magic, body) = match channels {
        1 => ("P5", to_bytes(planar)),
        3 => {
            let px = h * w;
            let mut inter = Vec::with_capacity(3 * px);
            for i in 0..px {
                inter.extend([planar[i], planar[px + i], planar[2 * px + i]]);
            }
            ("P6", to_bytes(&inter))
        }
        c => return Err(Error::invalid(format!("cannot encode {c}-channel image as PNM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(body);
    Ok(out)
}

/// Writes one `[C, H, W]` image in `[-1, 1]` as binary PGM (or PPM for 3
/// channels).
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("write_pgm", format!("expected [C, H, W], got {s:?}")));
    }
    write_atomic(path, &encode_pnm(s[0], s[1], s[2], image.data())?)
}

/// Tiles `[n, C, H, W]` images into a grid with `cols` columns.
pub fn write_image_grid(path: &Path, images: &Tensor, cols: usize) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || cols == 0 {
        return Err(Error::shape("write_image_grid", format!("expected [n, C, H, W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut grid = vec![-1.0; c * gh * gw];
    for i in 0..n {
        let (r0, c0) = ((i / cols) * h, (i % cols) * w);
        let img = images.row(i);
        for ch in 0..c {
            for y in 0..h {
                let src = &img[(ch * h + y) * w..(ch * h + y + 1) * w];
                let off = (ch * gh + r0 + y) * gw + c0;
                grid[off..off + w].copy_from_slice(src);
            }
        }
    }
    write_atomic(path, &encode_pnm(c, gh, gw, &grid)?)
}

/// `index, target, loss_a, loss_b` rows.
pub fn write_pairs_csv(path: &Path, targets: &[usize], pairs: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["index", "target", "loss_a", "loss_b"]).map_err(err)?;
    for (i, (t, (a, b))) in targets.iter().zip(pairs).enumerate() {
        w.write_record([i.to_string(), t.to_string(), a.to_string(), b.to_string()])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}
