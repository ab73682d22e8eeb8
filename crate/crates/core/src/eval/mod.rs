//! Attack metrics and report assembly.

mod report;

pub use report::{write_image_grid, write_pgm, write_pairs_csv, AttackReport, Stat};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::invert::identity_loss_ce;
use crate::nn::{Classifier, Parameterized};
use crate::tensor::{Tape, Tensor};

const BATCH: usize = 256;

/// Whether each row's target is among its `k` largest logits. Ties are
/// broken toward the lower class index, like a stable sort.
pub fn topk_hits(logits: &Tensor, targets: &[usize], k: usize) -> Vec<bool> {
    let c = logits.shape()[1];
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let v = row[t];
            let better = row
                .iter()
                .enumerate()
                .filter(|&(j, &x)| x > v || (x == v && j < t))
                .count();
            better < k
        })
        .collect()
}

/// Mean and spread of per-group accuracies in percent.
pub fn group_stat(hits: &[bool], groups: &[usize]) -> Result<Stat> {
    if hits.is_empty() || hits.len() != groups.len() {
        return Err(Error::invalid("accuracy over an empty or misaligned reconstruction set"));
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let per_group: Vec<f64> = ids
        .iter()
        .map(|&g| {
            let (n, h) = hits
                .iter()
                .zip(groups)
                .filter(|(_, &gi)| gi == g)
                .fold((0usize, 0usize), |(n, h), (&hit, _)| (n + 1, h + hit as usize));
            100.0 * h as f64 / n as f64
        })
        .collect();
    let mean = per_group.iter().sum::<f64>() / per_group.len() as f64;
    let var = per_group.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / per_group.len() as f64;
    Ok(Stat {
        mean,
        std: var.sqrt(),
        per_group,
    })
}

/// Top-k accuracy of the evaluation model on reconstructions, with the
/// spread taken across `groups` (one group id per reconstruction).
pub fn attack_accuracy(
    recons: &Tensor,
    targets: &[usize],
    groups: &[usize],
    eval_model: &Classifier,
    topk: usize,
) -> Result<Stat> {
    if recons.shape()[0] != targets.len() {
        return Err(Error::invalid(format!(
            "{} reconstructions for {} targets",
            recons.shape()[0],
            targets.len()
        )));
    }
    let logits = eval_model.predict_logits(recons, BATCH)?;
    group_stat(&topk_hits(&logits, targets, topk), groups)
}

/// Shortest L2 distance from each query row to any reference row.
pub fn nearest_distances(queries: &Tensor, reference: &Tensor) -> Result<Vec<f64>> {
    let (q, r) = (queries.shape(), reference.shape());
    if q.len() != 2 || r.len() != 2 || q[1] != r[1] {
        return Err(Error::shape("nearest_distances", format!("{q:?} vs {r:?}")));
    }
    Ok((0..q[0])
        .map(|i| {
            let a = queries.row(i);
            (0..r[0])
                .map(|j| {
                    a.iter()
                        .zip(reference.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

/// Mean over reconstructions (all aimed at class `k`) of the shortest
/// evaluation-model feature distance to a private sample of class `k`.
pub fn knn_dist(recons: &Tensor, private: &Dataset, eval_model: &Classifier, k: usize) -> Result<f64> {
    let idx = private.indices_of(k);
    if idx.is_empty() {
        return Err(Error::invalid(format!("class {k} has no private samples")));
    }
    let reference = eval_model.predict_features(&private.images().select_outer(&idx)?, BATCH)?;
    let feats = eval_model.predict_features(recons, BATCH)?;
    let d = nearest_distances(&feats, &reference)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Per-reconstruction KNN distance toward each reconstruction's own class.
pub fn knn_dist_per_sample(
    recons: &Tensor,
    targets: &[usize],
    private: &Dataset,
    eval_model: &Classifier,
) -> Result<Vec<f64>> {
    let feats = eval_model.predict_features(recons, BATCH)?;
    let private_feats = eval_model.predict_features(private.images(), BATCH)?;
    let mut out = vec![0.0; targets.len()];
    let mut classes: Vec<usize> = targets.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for k in classes {
        let idx = private.indices_of(k);
        if idx.is_empty() {
            return Err(Error::invalid(format!("class {k} has no private samples")));
        }
        let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] == k).collect();
        let d = nearest_distances(&feats.select_outer(&rows)?, &private_feats.select_outer(&idx)?)?;
        for (r, v) in rows.into_iter().zip(d) {
            out[r] = v;
        }
    }
    Ok(out)
}

/// Linear-interpolation percentile (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Defaults to the median of `loss_a`.
    pub tau_low: Option<f64>,
    /// Defaults to the 90th percentile of `loss_b`.
    pub tau_high: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitAnalysis {
    /// `(loss under model_a, loss under model_b)` per reconstruction.
    pub pairs: Vec<(f64, f64)>,
    pub tau_low: f64,
    pub tau_high: f64,
    pub fraction_low_high: f64,
}

/// Cross-entropy identity loss of each reconstruction under two models and
/// the share that is low under `model_a` but high under `model_b`.
pub fn overfit_analysis(
    recons: &Tensor,
    targets: &[usize],
    model_a: &Classifier,
    model_b: &Classifier,
    thresholds: Thresholds,
) -> Result<OverfitAnalysis> {
    if model_a.num_classes() != model_b.num_classes() {
        return Err(Error::invalid("overfit analysis needs models with the same classes"));
    }
    if recons.shape()[0] != targets.len() || targets.is_empty() {
        return Err(Error::invalid("overfit analysis needs one target per reconstruction"));
    }
    let la = ce_losses(model_a, recons, targets)?;
    let lb = ce_losses(model_b, recons, targets)?;
    let tau_low = thresholds.tau_low.unwrap_or_else(|| percentile(&la, 50.0));
    let tau_high = thresholds.tau_high.unwrap_or_else(|| percentile(&lb, 90.0));
    let hits = la.iter().zip(&lb).filter(|(a, b)| **a <= tau_low && **b >= tau_high).count();
    Ok(OverfitAnalysis {
        pairs: la.into_iter().zip(lb).collect(),
        tau_low,
        tau_high,
        fraction_low_high: hits as f64 / targets.len() as f64,
    })
}

fn ce_losses(model: &Classifier, x: &Tensor, ks: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ks.len());
    let n = ks.len();
    let mut start = 0;
    while start < n {
        let end = (start + BATCH).min(n);
        let tape = Tape::new();
        let p = model.bind(&tape, false);
        let l = identity_loss_ce(model, &p, tape.constant(x.slice_outer(start, end)?), &ks[start..end])?;
        out.extend_from_slice(l.value().data());
        start = end;
    }
    Ok(out)
}
