use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PregMode {
    /// `p_reg = μ_pen`.
    Fixed,
    /// `p_reg ~ N(μ_pen, diag σ_pen²)`, drawn once per run.
    #[default]
    Sampled,
}

/// Feature-space anchor statistics over `p̃ = [p; 1]` estimated on public
/// images. The bias slot is constant, so its mean is 1 and its std 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PregEstimator {
    pub mu: Tensor,
    /// Componentwise population standard deviation.
    pub sigma: Tensor,
    pub mode: PregMode,
    pub n_public_used: usize,
}

impl PregEstimator {
    /// Statistics of penultimate features `[N, d]` (without the appended 1).
    pub fn from_features(features: &Tensor, mode: PregMode) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 || s[0] < 2 {
            return Err(Error::invalid(format!(
                "p_reg estimation needs at least two feature rows, got shape {s:?}"
            )));
        }
        let (n, d) = (s[0], s[1]);
        let mut mu = vec![0.0; d + 1];
        for i in 0..n {
            for (m, v) in mu.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        mu.iter_mut().take(d).for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d + 1];
        for i in 0..n {
            for ((s2, v), m) in var.iter_mut().zip(features.row(i)).zip(&mu) {
                *s2 += (v - m) * (v - m);
            }
        }
        mu[d] = 1.0;
        let sigma = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        Ok(PregEstimator {
            mu: Tensor::from_vec(mu),
            sigma: Tensor::from_vec(sigma),
            mode,
            n_public_used: n,
        })
    }

    /// Length of `p̃`.
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// One anchor `p_reg` of length `d+1`.
    pub fn draw(&self, rng: &mut Rng) -> Tensor {
        use rand::Rng as _;
        match self.mode {
            PregMode::Fixed => self.mu.clone(),
            PregMode::Sampled => {
                let data = self
                    .mu
                    .data()
                    .iter()
                    .zip(self.sigma.data())
                    .map(|(&m, &s)| {
                        let e: f64 = rng.sample(StandardNormal);
                        m + s * e
                    })
                    .collect();
                Tensor::from_vec(data)
            }
        }
    }

    /// `n` independent anchors stacked as `[n, d+1]`.
    pub fn draw_rows(&self, n: usize, rng: &mut Rng) -> Tensor {
        let mut data = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            data.extend_from_slice(self.draw(rng).data());
        }
        Tensor::from_parts_unchecked(vec![n, self.dim()], data)
    }
}

/// Estimates the anchor statistics from `n` seeded-random public images
/// passed through `model`.
pub fn estimate_preg(model: &Classifier, public: &Dataset, n: usize, seed: u64) -> Result<PregEstimator> {
    if n < 2 || n > public.len() {
        return Err(Error::invalid(format!(
            "p_reg estimation wants {n} public images, but needs 2 <= N <= {}",
            public.len()
        )));
    }
    let sample = public.take(n, Some(seed))?;
    let feats = model.predict_features(sample.images(), 256)?;
    PregEstimator::from_features(&feats, PregMode::default())
}

/// The pipeline's sample count: 5000 public images, or all of them when fewer exist.
pub fn default_preg_count(public: &Dataset) -> usize {
    public.len().min(5000)
}
