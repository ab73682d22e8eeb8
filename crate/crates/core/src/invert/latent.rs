use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::{Tape, Tensor, Var};

/// Latent search space. Each row is one independent distribution (one
/// inversion slot).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentDistribution {
    /// `δ(z - z0)`, `z0: [m, n_z]`.
    PointEstimate { z0: Tensor },
    /// `N(μ, diag σ²)` with `μ, log σ: [m, n_z]`.
    DiagonalGaussian { mu: Tensor, log_sigma: Tensor },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    PointEstimate,
    DiagonalGaussian,
}

impl LatentDistribution {
    /// Default starting point: point rows `~ N(0, I)` (clipped when `clip`),
    /// or `μ = 0, log σ = 0`.
    pub fn init(kind: LatentKind, rows: usize, latent_dim: usize, clip: bool, rng: &mut Rng) -> Self {
        match kind {
            LatentKind::PointEstimate => {
                let z = Tensor::randn(&[rows, latent_dim], 1.0, rng);
                LatentDistribution::PointEstimate {
                    z0: if clip { clip_unit(&z) } else { z },
                }
            }
            LatentKind::DiagonalGaussian => LatentDistribution::DiagonalGaussian {
                mu: Tensor::zeros(&[rows, latent_dim]),
                log_sigma: Tensor::zeros(&[rows, latent_dim]),
            },
        }
    }

    pub fn kind(&self) -> LatentKind {
        match self {
            LatentDistribution::PointEstimate { .. } => LatentKind::PointEstimate,
            LatentDistribution::DiagonalGaussian { .. } => LatentKind::DiagonalGaussian,
        }
    }

    pub fn rows(&self) -> usize {
        self.params()[0].shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.params()[0].shape()[1]
    }

    /// Optimized tensors: `[z0]` or `[μ, log σ]`.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            LatentDistribution::PointEstimate { z0 } => vec![z0],
            LatentDistribution::DiagonalGaussian { mu, log_sigma } => vec![mu, log_sigma],
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LatentDistribution::PointEstimate { z0 } => vec![z0],
            LatentDistribution::DiagonalGaussian { mu, log_sigma } => vec![mu, log_sigma],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = self.params();
        if ps.iter().any(|p| p.shape().len() != 2 || p.shape() != ps[0].shape()) {
            return Err(Error::invalid("latent parameters must be [m, n_z] matrices of one shape"));
        }
        // log σ = -inf encodes σ = 0
        let ok = match self {
            LatentDistribution::PointEstimate { z0 } => z0.all_finite(),
            LatentDistribution::DiagonalGaussian { mu, log_sigma } => {
                mu.all_finite() && log_sigma.data().iter().all(|v| !v.is_nan() && *v < f64::INFINITY)
            }
        };
        if !ok {
            return Err(Error::invalid("latent parameters must be finite (log σ may be -inf)"));
        }
        Ok(())
    }

    /// Keeps only the given rows.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Ok(match self {
            LatentDistribution::PointEstimate { z0 } => LatentDistribution::PointEstimate {
                z0: z0.select_outer(rows)?,
            },
            LatentDistribution::DiagonalGaussian { mu, log_sigma } => LatentDistribution::DiagonalGaussian {
                mu: mu.select_outer(rows)?,
                log_sigma: log_sigma.select_outer(rows)?,
            },
        })
    }

    /// Stacks distributions of the same kind row-wise.
    pub fn concat(parts: &[LatentDistribution]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero latent distributions"))?;
        if parts.iter().any(|p| p.kind() != first.kind()) {
            return Err(Error::invalid("cannot stack point and Gaussian latents"));
        }
        let stack = |i: usize| -> Result<Tensor> {
            let ts: Vec<&Tensor> = parts.iter().map(|p| p.params()[i]).collect();
            Tensor::concat_outer(&ts)
        };
        Ok(match first.kind() {
            LatentKind::PointEstimate => LatentDistribution::PointEstimate { z0: stack(0)? },
            LatentKind::DiagonalGaussian => LatentDistribution::DiagonalGaussian {
                mu: stack(0)?,
                log_sigma: stack(1)?,
            },
        })
    }
}

/// Upper bound on `log σ` during optimization. Draws are clipped to
/// `[-1, 1]` in the end, so a wider σ buys nothing, and an unbounded one
/// overflows `exp`.
pub const LOG_SIGMA_MAX: f64 = 2.0;

pub(crate) fn cap_log_sigma(ls: &Tensor) -> Tensor {
    ls.map(|v| v.min(LOG_SIGMA_MAX))
}

pub(crate) fn clip_unit(z: &Tensor) -> Tensor {
    z.map(|v| v.clamp(-1.0, 1.0))
}

/// Draws latents. A point estimate returns `n` rows cycling through `z0`; a
/// Gaussian returns `n` reparameterized draws `μ + σ⊙ε` per row, grouped by
/// row (`[m·n, n_z]`). With `clip`, every element is clamped to `[-1, 1]`.
pub fn sample_latent(dist: &LatentDistribution, n: usize, clip: bool, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("sample_latent needs n > 0"));
    }
    dist.validate()?;
    let z = match dist {
        LatentDistribution::PointEstimate { z0 } => {
            let rows: Vec<usize> = (0..n).map(|i| i % z0.shape()[0]).collect();
            z0.select_outer(&rows)?
        }
        LatentDistribution::DiagonalGaussian { .. } => {
            let tape = Tape::new();
            let eps = standard_noise(dist.rows() * n, dist.latent_dim(), &mut rng_from_seed(seed));
            let (z, _) = reparameterize(&tape, dist, n, eps)?;
            (*z.value()).clone()
        }
    };
    Ok(if clip { clip_unit(&z) } else { z })
}

pub(crate) fn standard_noise(rows: usize, latent_dim: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(&[rows, latent_dim], 1.0, rng)
}

/// Puts the distribution parameters on `tape` as trainable leaves and returns
/// the latent draws `[m·n, n_z]` (point: each row repeated `n` times) plus the
/// leaves.
pub(crate) fn reparameterize<'t>(
    tape: &'t Tape,
    dist: &LatentDistribution,
    n: usize,
    eps: Tensor,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let rows: Vec<usize> = (0..dist.rows() * n).map(|i| i / n).collect();
    match dist {
        LatentDistribution::PointEstimate { z0 } => {
            let z = tape.param(z0.clone());
            let zs = if n == 1 { z } else { z.select_rows(&rows)? };
            Ok((zs, vec![z]))
        }
        LatentDistribution::DiagonalGaussian { mu, log_sigma } => {
            let mu = tape.param(mu.clone());
            let ls = tape.param(log_sigma.clone());
            let (mr, lr) = if n == 1 { (mu, ls) } else { (mu.select_rows(&rows)?, ls.select_rows(&rows)?) };
            let z = mr.add(lr.exp().mul(tape.constant(eps))?)?;
            Ok((z, vec![mu, ls]))
        }
    }
}
