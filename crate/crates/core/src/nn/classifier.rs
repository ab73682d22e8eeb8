use serde::{Deserialize, Serialize};

use super::{he_normal, Parameterized};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{Tape, Tensor, Var};

/// Shape of a ConvK network: `depth` blocks of 3×3 conv (pad 1) + ReLU +
/// 2×2 max-pool with widths `base_width·2^i`, a linear layer to `feat_dim`
/// penultimate features (ReLU), and a bias-folded linear head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub depth: usize,
    pub base_width: usize,
    pub feat_dim: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
}

impl ClassifierArch {
    pub fn conv(depth: usize, image_shape: [usize; 3], num_classes: usize) -> Self {
        ClassifierArch {
            depth,
            base_width: 16,
            feat_dim: 128,
            in_channels: image_shape[0],
            image_size: image_shape[1],
            num_classes,
        }
    }

    /// Parses tags such as `Conv3` / `conv5`.
    pub fn from_tag(tag: &str, image_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let depth = tag
            .strip_prefix("Conv")
            .or_else(|| tag.strip_prefix("conv"))
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|d| (1..=8).contains(d))
            .ok_or_else(|| Error::invalid(format!("unknown architecture tag `{tag}`")))?;
        if image_shape[1] != image_shape[2] {
            return Err(Error::invalid("ConvK expects square images"));
        }
        Ok(Self::conv(depth, image_shape, num_classes))
    }

    pub fn tag(&self) -> String {
        format!("Conv{}", self.depth)
    }

    fn widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_width << i).collect()
    }

    /// Flattened size entering the feature layer.
    pub fn flat_dim(&self) -> usize {
        let mut side = self.image_size;
        for _ in 0..self.depth {
            side = side.div_ceil(2);
        }
        self.widths().last().copied().unwrap_or(self.in_channels) * side * side
    }
}

/// A ConvK classifier. The head is stored as `W: [K, d+1]`; row `k` is
/// `w_k` with the bias in the last column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub seed: u64,
    params: Vec<Tensor>,
}

impl Parameterized for Classifier {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }
}

impl Classifier {
    pub fn new(arch: ClassifierArch, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut params = Vec::new();
        let mut cin = arch.in_channels;
        for w in arch.widths() {
            params.push(he_normal(&[w, cin, 3, 3], cin * 9, &mut rng));
            params.push(Tensor::zeros(&[w]));
            cin = w;
        }
        let flat = arch.flat_dim();
        params.push(he_normal(&[arch.feat_dim, flat], flat, &mut rng));
        params.push(Tensor::zeros(&[arch.feat_dim]));
        let head = Tensor::randn(
            &[arch.num_classes, arch.feat_dim + 1],
            (1.0 / arch.feat_dim as f64).sqrt(),
            &mut rng,
        );
        let mut head = head;
        for k in 0..arch.num_classes {
            head.data_mut()[k * (arch.feat_dim + 1) + arch.feat_dim] = 0.0;
        }
        params.push(head);
        Classifier { arch, seed, params }
    }

    pub fn from_params(arch: ClassifierArch, seed: u64, params: Vec<Tensor>) -> Result<Self> {
        let template = Classifier::new(arch.clone(), 0);
        if template.params.len() != params.len()
            || template.params.iter().zip(&params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::invalid(format!(
                "parameter shapes do not match architecture {}",
                arch.tag()
            )));
        }
        Ok(Classifier { arch, seed, params })
    }

    pub fn arch_tag(&self) -> String {
        self.arch.tag()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn feat_dim(&self) -> usize {
        self.arch.feat_dim
    }

    /// Head matrix `[K, d+1]`.
    pub fn head(&self) -> &Tensor {
        self.params.last().expect("head present")
    }

    fn check_input(&self, x: &Var<'_>) -> Result<()> {
        let s = x.shape();
        let a = &self.arch;
        if s.len() != 4 || s[1] != a.in_channels || s[2] != a.image_size || s[3] != a.image_size {
            return Err(Error::shape(
                "classifier",
                format!(
                    "input {:?}, expected [n, {}, {}, {}]",
                    s, a.in_channels, a.image_size, a.image_size
                ),
            ));
        }
        Ok(())
    }

    /// Penultimate features `p: [n, d]` using parameters bound by
    /// [`Parameterized::bind`].
    pub fn features<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&x)?;
        let mut h = x;
        for i in 0..self.arch.depth {
            h = h.conv2d(p[2 * i], Some(p[2 * i + 1]), 1, 1)?.relu().maxpool2()?;
        }
        let k = 2 * self.arch.depth;
        Ok(h.flatten()?.matmul_t(p[k])?.add_row(p[k + 1])?.relu())
    }

    /// `p̃ = [p; 1]`, shape `[n, d+1]`.
    pub fn penultimate<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        self.features(p, x)?.append_ones()
    }

    /// Logits `W · p̃` and `p̃` together.
    pub fn forward_full<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let pt = self.penultimate(p, x)?;
        let head = *p.last().expect("head bound");
        Ok((pt.matmul_t(head)?, pt))
    }

    pub fn logits<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_full(p, x)?.0)
    }

    /// Inference-only logits in chunks of `batch`.
    pub fn predict_logits(&self, images: &Tensor, batch: usize) -> Result<Tensor> {
        self.map_batches(images, batch, |tape, p, x| self.logits(p, tape.constant(x)))
    }

    /// Inference-only penultimate features `p` (without the appended 1).
    pub fn predict_features(&self, images: &Tensor, batch: usize) -> Result<Tensor> {
        self.map_batches(images, batch, |tape, p, x| self.features(p, tape.constant(x)))
    }

    fn map_batches<F>(&self, images: &Tensor, batch: usize, f: F) -> Result<Tensor>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>], Tensor) -> Result<Var<'t>>,
    {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let tape = Tape::new();
            let p = self.bind(&tape, false);
            let out = f(&tape, &p, images.slice_outer(start, end)?)?;
            parts.push((*out.value()).clone());
            start = end;
        }
        Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())
    }
}
