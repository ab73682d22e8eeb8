//! Datasets, the class-disjoint split and synthetic data.

mod cache;
mod idx;
mod synth;

pub use cache::{read_cache, write_cache, CacheHeader};
pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels};
pub use synth::synth_blobs;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

/// Labelled images `[N, C, H, W]` with pixels in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_set: BTreeSet<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape(
                "dataset",
                format!("images must be NCHW, got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(bad) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {bad} outside [-1, 1]")));
        }
        let class_set = labels.iter().copied().collect();
        Ok(Dataset {
            images,
            labels,
            class_set,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_set(&self) -> &BTreeSet<usize> {
        &self.class_set
    }

    pub fn num_classes(&self) -> usize {
        self.class_set.len()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        let images = self.images.select_outer(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels)
    }

    /// Images and labels at `idx`, ready to feed a model.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_outer(idx)?;
        Ok((images, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Indices of samples whose label is `class`.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// First `n` samples (after a seeded shuffle when `seed` is given).
    pub fn take(&self, n: usize, seed: Option<u64>) -> Result<Dataset> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(s) = seed {
            idx.shuffle(&mut rng_from_seed(s));
        }
        idx.truncate(n.min(self.len()));
        self.subset(&idx)
    }

    /// Seeded split into `(train, holdout)` with `holdout_frac` of the data
    /// held out (at least one sample on each side).
    pub fn split_holdout(&self, holdout_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if self.len() < 2 {
            return Err(Error::invalid("need at least two samples to hold one out"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng_from_seed(seed));
        let n_hold = ((self.len() as f64 * holdout_frac).round() as usize).clamp(1, self.len() - 1);
        let (hold, train) = idx.split_at(n_hold);
        Ok((self.subset(train)?, self.subset(hold)?))
    }
}

/// Class-disjoint assignment of raw labels to the private and public halves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub private_classes: BTreeSet<usize>,
    pub public_classes: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn new(
        private: impl IntoIterator<Item = usize>,
        public: impl IntoIterator<Item = usize>,
    ) -> Self {
        SplitSpec {
            private_classes: private.into_iter().collect(),
            public_classes: public.into_iter().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let overlap: Vec<_> = self.private_classes.intersection(&self.public_classes).collect();
        if !overlap.is_empty() {
            return Err(Error::invalid(format!(
                "private and public classes overlap on {overlap:?}"
            )));
        }
        if self.private_classes.is_empty() || self.public_classes.is_empty() {
            return Err(Error::invalid("private and public class sets must be nonempty"));
        }
        Ok(())
    }
}

/// Result of [`split_disjoint`].
#[derive(Clone, Debug)]
pub struct Split {
    /// Private samples with labels re-indexed to `0..K`.
    pub private: Dataset,
    /// Public samples; labels keep their raw values and are never consumed.
    pub public: Dataset,
    /// `dense_to_raw[k]` is the raw label of private class `k`.
    pub dense_to_raw: Vec<usize>,
}

impl Split {
    pub fn raw_to_dense(&self) -> BTreeMap<usize, usize> {
        self.dense_to_raw.iter().enumerate().map(|(d, &r)| (r, d)).collect()
    }
}

pub fn split_disjoint(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let dense_to_raw: Vec<usize> = spec.private_classes.iter().copied().collect();
    let raw_to_dense: BTreeMap<usize, usize> =
        dense_to_raw.iter().enumerate().map(|(d, &r)| (r, d)).collect();

    let mut priv_idx = Vec::new();
    let mut pub_idx = Vec::new();
    for (i, l) in dataset.labels().iter().enumerate() {
        if spec.private_classes.contains(l) {
            priv_idx.push(i);
        } else if spec.public_classes.contains(l) {
            pub_idx.push(i);
        }
    }
    if priv_idx.is_empty() {
        return Err(Error::invalid("split leaves the private dataset empty"));
    }
    if pub_idx.is_empty() {
        return Err(Error::invalid("split leaves the public dataset empty"));
    }
    let priv_images = dataset.images().select_outer(&priv_idx)?;
    let priv_labels = priv_idx.iter().map(|&i| raw_to_dense[&dataset.labels()[i]]).collect();
    let private = Dataset::new(priv_images, priv_labels)?;
    let public = dataset.subset(&pub_idx)?;
    Ok(Split {
        private,
        public,
        dense_to_raw,
    })
}
