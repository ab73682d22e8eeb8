//! GAN training.
//!
//! Probabilistic mode uses the non-saturating logistic loss. Critic mode uses
//! the Wasserstein loss with a gradient penalty on random interpolates; the
//! penalty's parameter gradient needs a mixed second derivative, which is
//! taken as a central difference of parameter gradients along the unit input
//! gradient direction (the tape itself is first-order only).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::nets::{DiscMode, Discriminator, DiscriminatorArch, Generator, GeneratorArch};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::{Optimizer, OptimizerKind, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanHyper {
    /// Generator updates.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Discriminator updates per generator update in critic mode.
    pub critic_steps: usize,
    pub gp_weight: f64,
    /// Finite-difference step for the penalty's mixed derivative.
    pub gp_fd_step: f64,
}

impl Default for GanHyper {
    fn default() -> Self {
        GanHyper {
            iterations: 1500,
            batch_size: 64,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            critic_steps: 5,
            gp_weight: 10.0,
            gp_fd_step: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanReport {
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
    pub gradient_penalty: Vec<f64>,
    /// Mean `D(G(z))` on a fixed probe batch at the end of training.
    pub final_fake_output: f64,
}

fn sample_z(n: usize, n_z: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(&[n, n_z], 1.0, rng)
}

fn sample_real(data: &Dataset, n: usize, rng: &mut Rng) -> Result<Tensor> {
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..data.len())).collect();
    data.images().select_outer(&idx)
}

fn grads_of(grads: &crate::tensor::Gradients, vars: &[Var<'_>]) -> Vec<Tensor> {
    vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
}

/// Gradient penalty `λ·mean_i (‖∇ₓD(x̂ᵢ)‖ − 1)²` at `interp`, and its
/// gradient with respect to the discriminator parameters.
pub fn gradient_penalty(
    disc: &Discriminator,
    interp: &Tensor,
    weight: f64,
    fd_step: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let n = interp.shape()[0];
    let per = interp.len() / n;

    let input_grad = {
        let tape = Tape::new();
        let p = disc.bind(&tape, false);
        let x = tape.param(interp.clone());
        let s = disc.score(&p, x)?.sum();
        tape.backward(s)?.get_or_zeros(x)
    };

    let mut value = 0.0;
    let mut coeff = Vec::with_capacity(n);
    let mut plus = interp.clone();
    let mut minus = interp.clone();
    for i in 0..n {
        let g = &input_grad.data()[i * per..(i + 1) * per];
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        value += (norm - 1.0).powi(2);
        // d/dθ (‖g‖-1)² = 2(‖g‖-1)·vᵀ ∂g/∂θ with v = g/‖g‖
        let c = if norm > 0.0 { 2.0 * weight * (norm - 1.0) / n as f64 } else { 0.0 };
        coeff.push(c / (2.0 * fd_step));
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        for j in 0..per {
            let v = g[j] * inv * fd_step;
            plus.data_mut()[i * per + j] += v;
            minus.data_mut()[i * per + j] -= v;
        }
    }
    value *= weight / n as f64;

    let tape = Tape::new();
    let p = disc.bind(&tape, true);
    let sp = disc.score(&p, tape.constant(plus))?;
    let sm = disc.score(&p, tape.constant(minus))?;
    let c = tape.constant(Tensor::from_vec(coeff));
    let surrogate = sp.sub(sm)?.mul(c)?.sum();
    let grads = tape.backward(surrogate)?;
    Ok((value, grads_of(&grads, &p)))
}

fn add_into(acc: &mut [Tensor], extra: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(extra) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

fn check_finite(v: f64, iteration: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration,
            detail: format!("{what} = {v}"),
        })
    }
}

pub fn train_gan(
    public: &Dataset,
    latent_dim: usize,
    mode: DiscMode,
    hyper: &GanHyper,
    seed: u64,
) -> Result<(Generator, Discriminator, GanReport)> {
    if public.is_empty() {
        return Err(Error::invalid("GAN training needs a nonempty public dataset"));
    }
    let shape = public.image_shape();
    let mut gen = Generator::new(GeneratorArch::for_image(latent_dim, shape)?, derive_seed(seed, "generator"));
    let mut disc = Discriminator::new(
        DiscriminatorArch::for_image(shape),
        mode,
        derive_seed(seed, "discriminator"),
    );
    let (betas, critic_steps) = match mode {
        DiscMode::Critic => ((0.5, 0.9), hyper.critic_steps.max(1)),
        DiscMode::Probabilistic => ((0.5, 0.999), 1),
    };
    let mut opt_g = Optimizer::new(OptimizerKind::adam_with(betas.0, betas.1), hyper.lr_generator);
    let mut opt_d = Optimizer::new(OptimizerKind::adam_with(betas.0, betas.1), hyper.lr_discriminator);
    let mut rng = rng_from_seed(derive_seed(seed, "gan-stream"));
    let b = hyper.batch_size.max(1);
    let mut report = GanReport::default();

    for it in 0..hyper.iterations {
        for _ in 0..critic_steps {
            let real = sample_real(public, b, &mut rng)?;
            let fake = gen.generate(&sample_z(b, latent_dim, &mut rng))?;
            let tape = Tape::new();
            let p = disc.bind(&tape, true);
            let sr = disc.score(&p, tape.constant(real.clone()))?;
            let sf = disc.score(&p, tape.constant(fake.clone()))?;
            let loss = match mode {
                DiscMode::Critic => sf.mean().sub(sr.mean())?,
                DiscMode::Probabilistic => sr.neg().softplus().mean().add(sf.softplus().mean())?,
            };
            let mut g = grads_of(&tape.backward(loss)?, &p);
            let mut lv = loss.item();
            if mode == DiscMode::Critic {
                let mut interp = real.clone();
                let per = interp.len() / b;
                for i in 0..b {
                    let eps: f64 = rng.gen();
                    let (r, f) = (real.row(i), fake.row(i));
                    for j in 0..per {
                        interp.data_mut()[i * per + j] = eps * r[j] + (1.0 - eps) * f[j];
                    }
                }
                let (gp, gp_grads) = gradient_penalty(&disc, &interp, hyper.gp_weight, hyper.gp_fd_step)?;
                add_into(&mut g, &gp_grads);
                lv += gp;
                report.gradient_penalty.push(gp);
            }
            check_finite(lv, it, "discriminator loss")?;
            opt_d.step(disc.params_mut(), &g)?;
            report.d_loss.push(lv);
        }

        let z = sample_z(b, latent_dim, &mut rng);
        let tape = Tape::new();
        let pg = gen.bind(&tape, true);
        let pd = disc.bind(&tape, false);
        let s = disc.score(&pd, gen.forward(&pg, tape.constant(z))?)?;
        let loss = match mode {
            DiscMode::Critic => s.mean().neg(),
            DiscMode::Probabilistic => s.neg().softplus().mean(),
        };
        check_finite(loss.item(), it, "generator loss")?;
        let g = grads_of(&tape.backward(loss)?, &pg);
        opt_g.step(gen.params_mut(), &g)?;
        report.g_loss.push(loss.item());
    }

    let mut probe = rng_from_seed(derive_seed(seed, "probe"));
    let fake = gen.generate(&sample_z(256, latent_dim, &mut probe))?;
    report.final_fake_output = disc.output(&fake)?.sum() / 256.0;
    Ok((gen, disc, report))
}
