use std::io::Write;

use serde::{Deserialize, Serialize};

use super::latent::{cap_log_sigma, clip_unit, reparameterize, sample_latent, standard_noise, LatentDistribution, LatentKind};
use super::loss::IdentityLossSpec;
use crate::error::{Error, Result};
use crate::gan::{prior_loss_per_sample, Discriminator, Generator};
use crate::nn::{Classifier, Parameterized};
use crate::rng::{derive_indexed, derive_seed, rng_from_seed};
use crate::tensor::{Optimizer, OptimizerKind, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the discriminator prior term.
    pub lambda_prior: f64,
    /// Global multiplier on the identity loss.
    pub identity_scale: f64,
    pub clip_z: bool,
    pub restarts: usize,
    /// Monte Carlo draws per slot and iteration for Gaussian latents.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            iterations: 2400,
            lr: 0.02,
            momentum: 0.9,
            lambda_prior: 100.0,
            identity_scale: 1.0,
            clip_z: true,
            restarts: 5,
            mc_samples: 4,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be a finite value >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.lambda_prior >= 0.0 && self.lambda_prior.is_finite()) {
            return bad("lambda_prior", "must be >= 0");
        }
        if !(self.identity_scale > 0.0 && self.identity_scale.is_finite()) {
            return bad("identity_scale", "must be > 0");
        }
        if self.restarts == 0 {
            return bad("restarts", "must be >= 1");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples", "must be >= 1");
        }
        Ok(())
    }
}

/// The attacker's view: target classifier plus the public GAN.
#[derive(Clone, Copy)]
pub struct AttackModels<'a> {
    pub target: &'a Classifier,
    pub generator: &'a Generator,
    pub discriminator: &'a Discriminator,
}

/// Batch means at one iteration, before the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub identity_loss: f64,
    pub prior_loss: f64,
    pub parts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub classes: Vec<usize>,
    /// One image per slot, `[m, C, H, W]`.
    pub reconstructions: Tensor,
    /// The latents behind `reconstructions`.
    pub latents: Tensor,
    pub distribution: LatentDistribution,
    /// Identity loss of each slot at the end of optimization.
    pub final_identity_loss: Vec<f64>,
    pub selected_restart: Vec<usize>,
    pub part_names: Vec<String>,
    pub trace: Vec<TraceRow>,
}

fn check_inputs(models: &AttackModels<'_>, spec: &IdentityLossSpec, rows: usize, classes: &[usize]) -> Result<()> {
    spec.validate(models.target)?;
    if classes.len() != rows {
        return Err(Error::invalid(format!(
            "{} target classes for {} latent rows",
            classes.len(),
            rows
        )));
    }
    let k = models.target.num_classes();
    if let Some(&c) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("target class {c} outside 0..{k}")));
    }
    let shape = [
        models.generator.arch.out_channels,
        models.generator.arch.image_size,
        models.generator.arch.image_size,
    ];
    let t = &models.target.arch;
    if shape != [t.in_channels, t.image_size, t.image_size] {
        return Err(Error::shape(
            "invert",
            format!("generator emits {shape:?}, target expects [{}, {}, {}]", t.in_channels, t.image_size, t.image_size),
        ));
    }
    Ok(())
}

/// One run of latent optimization; each latent row is an independent slot
/// aimed at `classes[row]`.
pub fn invert(
    models: &AttackModels<'_>,
    spec: &IdentityLossSpec,
    dist0: &LatentDistribution,
    classes: &[usize],
    cfg: &InversionConfig,
) -> Result<Inversion> {
    cfg.validate()?;
    dist0.validate()?;
    check_inputs(models, spec, dist0.rows(), classes)?;
    if dist0.latent_dim() != models.generator.latent_dim() {
        return Err(Error::shape(
            "invert",
            format!("latent dim {} vs generator {}", dist0.latent_dim(), models.generator.latent_dim()),
        ));
    }
    let m = dist0.rows();
    let per = match dist0.kind() {
        LatentKind::PointEstimate => 1,
        LatentKind::DiagonalGaussian => cfg.mc_samples,
    };
    let expand: Vec<usize> = (0..m * per).map(|i| i / per).collect();
    let ks: Vec<usize> = expand.iter().map(|&i| classes[i]).collect();
    let anchors: Vec<Tensor> = spec
        .draw_anchors(m, &mut rng_from_seed(derive_seed(cfg.seed, "p_reg")))
        .iter()
        .map(|a| a.select_outer(&expand))
        .collect::<Result<_>>()?;

    let mut dist = dist0.clone();
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: cfg.momentum }, cfg.lr);
    let mut noise = rng_from_seed(derive_seed(cfg.seed, "noise"));
    let part_names = spec.part_names(models.target);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let n = (m * per) as f64;

    for it in 0..cfg.iterations {
        let tape = Tape::new();
        let eps = match dist.kind() {
            LatentKind::PointEstimate => Tensor::zeros(&[1]),
            LatentKind::DiagonalGaussian => standard_noise(m * per, dist.latent_dim(), &mut noise),
        };
        let (z, leaves) = reparameterize(&tape, &dist, per, eps)?;
        let pg = models.generator.bind(&tape, false);
        let pd = models.discriminator.bind(&tape, false);
        let bound = spec.bind(&tape, models.target);
        let x = models.generator.forward(&pg, z)?;
        let terms = spec.per_sample(models.target, &bound, x, &ks, &anchors)?;
        let prior = prior_loss_per_sample(models.discriminator, &pd, x)?;
        let objective = terms
            .total
            .scale(cfg.identity_scale)
            .add(prior.scale(cfg.lambda_prior))?
            .sum()
            .scale(1.0 / per as f64);

        let row = TraceRow {
            iteration: it,
            identity_loss: terms.total.value().sum() / n,
            prior_loss: prior.value().sum() / n,
            parts: terms.parts.iter().map(|p| p.value().sum() / n).collect(),
        };
        if !objective.item().is_finite() {
            let parts: Vec<String> = part_names
                .iter()
                .zip(&row.parts)
                .map(|(name, v)| format!("{name}={v}"))
                .collect();
            return Err(Error::Diverged {
                iteration: it,
                detail: format!(
                    "objective {} (identity {}, prior {}, {})",
                    objective.item(),
                    row.identity_loss,
                    row.prior_loss,
                    parts.join(", ")
                ),
            });
        }
        trace.push(row);
        let grads = tape.backward(objective)?;
        let g: Vec<Tensor> = leaves.iter().map(|v| grads.get_or_zeros(*v)).collect();
        let mut params: Vec<Tensor> = dist.params().into_iter().cloned().collect();
        opt.step(&mut params, &g)?;
        for (dst, src) in dist.params_mut().into_iter().zip(params) {
            *dst = src;
        }
        match (&mut dist, cfg.clip_z) {
            (LatentDistribution::PointEstimate { z0 }, true) => *z0 = clip_unit(z0),
            (LatentDistribution::DiagonalGaussian { log_sigma, .. }, _) => *log_sigma = cap_log_sigma(log_sigma),
            _ => {}
        }
        if let Err(e) = dist.validate() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("after update: {e}"),
            });
        }
    }

    // final latents: the point itself, or fresh draws from the learned Gaussian
    let z_all = match dist.kind() {
        LatentKind::PointEstimate => sample_latent(&dist, m, cfg.clip_z, 0)?,
        LatentKind::DiagonalGaussian => sample_latent(&dist, per, cfg.clip_z, derive_seed(cfg.seed, "final"))?,
    };
    let images = models.generator.generate(&z_all)?;
    let losses = spec.evaluate(models.target, &images, &ks, &anchors)?;
    let final_identity_loss = (0..m).map(|i| losses[i * per..(i + 1) * per].iter().sum::<f64>() / per as f64).collect();
    let first: Vec<usize> = (0..m).map(|i| i * per).collect();
    Ok(Inversion {
        classes: classes.to_vec(),
        reconstructions: images.select_outer(&first)?,
        latents: z_all.select_outer(&first)?,
        distribution: dist,
        final_identity_loss,
        selected_restart: vec![0; m],
        part_names,
        trace,
    })
}

/// Runs `cfg.restarts` independently initialized copies of every slot in one
/// batch and keeps, per slot, the restart with the lowest final identity loss.
pub fn invert_with_restarts(
    models: &AttackModels<'_>,
    spec: &IdentityLossSpec,
    kind: LatentKind,
    classes: &[usize],
    cfg: &InversionConfig,
) -> Result<Inversion> {
    cfg.validate()?;
    check_inputs(models, spec, classes.len(), classes)?;
    let m = classes.len();
    let r = cfg.restarts;
    let inits: Vec<LatentDistribution> = (0..r)
        .map(|i| {
            let mut rng = rng_from_seed(derive_indexed(cfg.seed, "init", i as u64));
            LatentDistribution::init(kind, m, models.generator.latent_dim(), cfg.clip_z, &mut rng)
        })
        .collect();
    let dist0 = LatentDistribution::concat(&inits)?;
    let all_classes: Vec<usize> = (0..r).flat_map(|_| classes.iter().copied()).collect();
    let run = invert(models, spec, &dist0, &all_classes, cfg)?;

    let mut pick = Vec::with_capacity(m);
    let mut chosen = Vec::with_capacity(m);
    for slot in 0..m {
        let best = (0..r)
            .min_by(|&a, &b| {
                run.final_identity_loss[a * m + slot].total_cmp(&run.final_identity_loss[b * m + slot])
            })
            .expect("restarts >= 1");
        chosen.push(best);
        pick.push(best * m + slot);
    }
    Ok(Inversion {
        classes: classes.to_vec(),
        reconstructions: run.reconstructions.select_outer(&pick)?,
        latents: run.latents.select_outer(&pick)?,
        distribution: run.distribution.select_rows(&pick)?,
        final_identity_loss: pick.iter().map(|&i| run.final_identity_loss[i]).collect(),
        selected_restart: chosen,
        part_names: run.part_names,
        trace: run.trace,
    })
}

/// Writes `iteration, identity_loss, prior_loss, <parts...>` as CSV.
pub fn write_trace_csv<W: Write>(out: W, part_names: &[String], trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iteration".to_string(), "identity_loss".into(), "prior_loss".into()];
    header.extend(part_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for row in trace {
        let mut rec = vec![row.iteration.to_string(), row.identity_loss.to_string(), row.prior_loss.to_string()];
        rec.extend(row.parts.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<trace>".into(),
        source: e,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}
