use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, CheckpointHeader, Parameterized};
use crate::rng::rng_from_seed;
use crate::tensor::{Tape, Tensor, Var};

pub const PROB_EPS: f64 = 1e-6;

/// `z -> linear -> [c0, s/4, s/4] -> (up2, conv3x3, relu) -> (up2, conv3x3) -> tanh`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub out_channels: usize,
    pub image_size: usize,
}

impl GeneratorArch {
    pub fn for_image(latent_dim: usize, image_shape: [usize; 3]) -> Result<Self> {
        if image_shape[1] != image_shape[2] || image_shape[1] % 4 != 0 {
            return Err(Error::invalid(format!(
                "generator needs square images with side divisible by 4, got {image_shape:?}"
            )));
        }
        Ok(GeneratorArch {
            latent_dim,
            base_channels: 32,
            out_channels: image_shape[0],
            image_size: image_shape[1],
        })
    }

    fn seed_side(&self) -> usize {
        self.image_size / 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub arch: GeneratorArch,
    pub seed: u64,
    params: Vec<Tensor>,
}

impl Parameterized for Generator {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }
}

impl Generator {
    pub fn new(arch: GeneratorArch, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let c0 = arch.base_channels;
        let c1 = c0 / 2;
        let s0 = arch.seed_side();
        let proj = c0 * s0 * s0;
        let params = vec![
            crate::nn::he_normal(&[proj, arch.latent_dim], arch.latent_dim, &mut rng),
            Tensor::zeros(&[proj]),
            crate::nn::he_normal(&[c1, c0, 3, 3], c0 * 9, &mut rng),
            Tensor::zeros(&[c1]),
            Tensor::randn(&[arch.out_channels, c1, 3, 3], (1.0 / (c1 * 9) as f64).sqrt(), &mut rng),
            Tensor::zeros(&[arch.out_channels]),
        ];
        Generator { arch, seed, params }
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    /// `[n, n_z] -> [n, C, S, S]` with values in `[-1, 1]`.
    pub fn forward<'t>(&self, p: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        let s = z.shape();
        if s.len() != 2 || s[1] != self.arch.latent_dim {
            return Err(Error::shape(
                "generator",
                format!("latent {:?}, expected [n, {}]", s, self.arch.latent_dim),
            ));
        }
        let s0 = self.arch.seed_side();
        let h = z
            .matmul_t(p[0])?
            .add_row(p[1])?
            .reshape(&[s[0], self.arch.base_channels, s0, s0])?
            .relu();
        let h = h.upsample2()?.conv2d(p[2], Some(p[3]), 1, 1)?.relu();
        Ok(h.upsample2()?.conv2d(p[4], Some(p[5]), 1, 1)?.tanh())
    }

    /// Inference-only generation.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        Ok((*self.forward(&p, tape.constant(z.clone()))?.value()).clone())
    }

    pub fn save(&self, path: &Path) -> Result<CheckpointHeader> {
        save_checkpoint(path, "generator", "DeconvG", &self.arch, self.seed, self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = load_checkpoint(path)?;
        expect_kind(path, &header, "generator")?;
        let arch: GeneratorArch = serde_json::from_value(header.arch)?;
        let template = Generator::new(arch.clone(), 0);
        check_shapes(path, template.params(), &params)?;
        Ok(Generator {
            arch,
            seed: header.seed,
            params,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscMode {
    /// Unbounded Wasserstein critic score.
    Critic,
    /// Sigmoid probability of "real".
    Probabilistic,
}

/// Two stride-2 3×3 convs with leaky ReLU and a linear score.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub in_channels: usize,
    pub image_size: usize,
    pub width: usize,
}

impl DiscriminatorArch {
    pub fn for_image(image_shape: [usize; 3]) -> Self {
        DiscriminatorArch {
            in_channels: image_shape[0],
            image_size: image_shape[1],
            width: 16,
        }
    }

    fn flat_dim(&self) -> usize {
        let side = self.image_size.div_ceil(2).div_ceil(2);
        2 * self.width * side * side
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub arch: DiscriminatorArch,
    pub mode: DiscMode,
    pub seed: u64,
    params: Vec<Tensor>,
}

impl Parameterized for Discriminator {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }
}

impl Discriminator {
    pub fn new(arch: DiscriminatorArch, mode: DiscMode, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let w = arch.width;
        let flat = arch.flat_dim();
        let params = vec![
            crate::nn::he_normal(&[w, arch.in_channels, 3, 3], arch.in_channels * 9, &mut rng),
            Tensor::zeros(&[w]),
            crate::nn::he_normal(&[2 * w, w, 3, 3], w * 9, &mut rng),
            Tensor::zeros(&[2 * w]),
            Tensor::randn(&[1, flat], (1.0 / flat as f64).sqrt(), &mut rng),
            Tensor::zeros(&[1]),
        ];
        Discriminator {
            arch,
            mode,
            seed,
            params,
        }
    }

    /// Raw score `[n]` (pre-sigmoid in probabilistic mode).
    pub fn score<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let a = &self.arch;
        if s.len() != 4 || s[1] != a.in_channels || s[2] != a.image_size || s[3] != a.image_size {
            return Err(Error::shape(
                "discriminator",
                format!("input {:?}, expected [n, {}, {}, {}]", s, a.in_channels, a.image_size, a.image_size),
            ));
        }
        let h = x.conv2d(p[0], Some(p[1]), 2, 1)?.leaky_relu(0.2);
        let h = h.conv2d(p[2], Some(p[3]), 2, 1)?.leaky_relu(0.2);
        let out = h.flatten()?.matmul_t(p[4])?.add_row(p[5])?;
        out.reshape(&[s[0]])
    }

    /// `D(x)` as reported to users: the critic score, or the clamped
    /// probability in probabilistic mode.
    pub fn output(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let s = self.score(&p, tape.constant(images.clone()))?;
        Ok(match self.mode {
            DiscMode::Critic => (*s.value()).clone(),
            DiscMode::Probabilistic => (*s.sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS).value()).clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<CheckpointHeader> {
        let tag = match self.mode {
            DiscMode::Critic => "ConvD-critic",
            DiscMode::Probabilistic => "ConvD-probabilistic",
        };
        save_checkpoint(path, "discriminator", tag, &(&self.arch, self.mode), self.seed, self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = load_checkpoint(path)?;
        expect_kind(path, &header, "discriminator")?;
        let (arch, mode): (DiscriminatorArch, DiscMode) = serde_json::from_value(header.arch)?;
        let template = Discriminator::new(arch.clone(), mode, 0);
        check_shapes(path, template.params(), &params)?;
        Ok(Discriminator {
            arch,
            mode,
            seed: header.seed,
            params,
        })
    }
}

fn expect_kind(path: &Path, header: &CheckpointHeader, kind: &str) -> Result<()> {
    if header.kind != kind {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected a {kind}, found `{}`", header.kind),
        });
    }
    Ok(())
}

fn check_shapes(path: &Path, want: &[Tensor], got: &[Tensor]) -> Result<()> {
    if want.len() != got.len() || want.iter().zip(got).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "parameter shapes do not match the stored architecture".into(),
        });
    }
    Ok(())
}
