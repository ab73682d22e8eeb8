//! Staged experiment runner with content-hashed caching.
//!
//! Every unit of work (a stage, or a stage restricted to one GAN mode or one
//! attack mode/variant pair) is recorded in `manifest.json` with the hashes of
//! its inputs and outputs. A unit whose key and outputs are unchanged is
//! skipped.

mod config;
mod manifest;
mod table;

pub use config::{
    AttackMode, AttackSpec, AugmentSpec, DataConfig, DataSource, ExperimentConfig, GanSpec, ModelSpec, Variant,
};
pub use manifest::{list_files, Manifest, StageEntry, Timings, MANIFEST_FILE, TIMINGS_FILE};
pub use table::{Comparison, ComparisonRow};

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, split_disjoint, synth_blobs, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{
    attack_accuracy, knn_dist_per_sample, overfit_analysis, topk_hits, write_image_grid, write_pairs_csv,
    AttackReport, Thresholds,
};
use crate::gan::{train_gan, DiscMode, Discriminator, Generator};
use crate::invert::{
    default_gammas, default_preg_count, estimate_preg, invert_with_restarts, write_trace_csv, AttackModels, BaseLoss,
    IdentityLossSpec, LatentDistribution, PregEstimator,
};
use crate::io::{file_sha256, read_bytes, sha256_hex, write_atomic};
use crate::nn::{distill, load_checkpoint, save_checkpoint, train_classifier, Classifier};
use crate::rng::{derive_indexed, derive_seed, rng_from_seed};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainTarget,
    TrainEval,
    Distill,
    TrainGan,
    Invert,
    Evaluate,
    AnalyzeOverfit,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::TrainTarget,
        Stage::TrainEval,
        Stage::Distill,
        Stage::TrainGan,
        Stage::Invert,
        Stage::Evaluate,
        Stage::AnalyzeOverfit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainTarget => "train-target",
            Stage::TrainEval => "train-eval",
            Stage::Distill => "distill",
            Stage::TrainGan => "train-gan",
            Stage::Invert => "invert",
            Stage::Evaluate => "evaluate",
            Stage::AnalyzeOverfit => "analyze-overfit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub unit: String,
    pub cached: bool,
    pub seconds: f64,
}

/// `invert/<mode>/<variant>/result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionRecord {
    pub mode: AttackMode,
    pub variant: Variant,
    pub seed: u64,
    /// Dense target class per reconstruction.
    pub classes: Vec<usize>,
    /// Candidate index per reconstruction; the spread is taken over these.
    pub groups: Vec<usize>,
    pub final_identity_loss: Vec<f64>,
    pub selected_restart: Vec<usize>,
    pub part_names: Vec<String>,
    pub preg_public_images: Option<usize>,
    pub distribution: LatentDistribution,
}

/// `analyze-overfit/<mode>/<variant>/summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitSummary {
    pub tau_low: f64,
    pub tau_high: f64,
    pub fraction_low_high: f64,
    pub n: usize,
    /// Variant whose losses fixed the default thresholds.
    pub thresholds_from: Variant,
}

fn rel(parts: &[&str]) -> String {
    parts.join("/")
}

fn missing(stage: &str, path: PathBuf) -> Error {
    Error::MissingArtifact {
        stage: stage.into(),
        path,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
    timings: Timings,
    split: OnceCell<Split>,
    outcomes: Vec<StageOutcome>,
    notify: Box<dyn FnMut(&StageOutcome)>,
}

impl Pipeline {
    /// Opens (or creates) `cfg.out_dir` and reads any existing manifest.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let manifest = Manifest::load_or_default(&out)?;
        let timings = Timings::load_or_default(&out);
        Ok(Pipeline {
            cfg,
            out,
            manifest,
            timings,
            split: OnceCell::new(),
            outcomes: Vec::new(),
            notify: Box::new(|_| {}),
        })
    }

    /// Called after every unit, cached or not.
    pub fn on_progress(&mut self, f: impl FnMut(&StageOutcome) + 'static) {
        self.notify = Box::new(f);
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn outcomes(&self) -> &[StageOutcome] {
        &self.outcomes
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label)
    }

    /// The class-disjoint split, loaded once per pipeline.
    pub fn split(&self) -> Result<&Split> {
        if let Some(s) = self.split.get() {
            return Ok(s);
        }
        let d = &self.cfg.data;
        let full = match &d.source {
            DataSource::Idx { images, labels } => load_idx(images, labels)?,
            DataSource::Synth {
                classes,
                per_class,
                image_size,
                seed,
            } => synth_blobs(*classes, *per_class, *image_size, *seed)?,
        };
        let full = match d.limit {
            Some(n) if n < full.len() => full.take(n, Some(self.seed_for("data-limit")))?,
            _ => full,
        };
        let spec = SplitSpec::new(d.private_classes.iter().copied(), d.public_classes.iter().copied());
        let split = split_disjoint(&full, &spec)?;
        Ok(self.split.get_or_init(|| split))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Runs `body` unless the manifest already holds `name` under the same
    /// key with intact outputs. `body` returns the relative paths it wrote.
    fn unit(
        &mut self,
        stage: Stage,
        name: &str,
        seed: u64,
        subtree: serde_json::Value,
        inputs: &[String],
        body: impl FnOnce(&Self) -> Result<Vec<String>>,
    ) -> Result<()> {
        let mut input_hashes = BTreeMap::new();
        for r in inputs {
            let p = self.path(r);
            if !p.is_file() {
                return Err(missing(stage.name(), p));
            }
            input_hashes.insert(r.clone(), file_sha256(&p)?);
        }
        let key = sha256_hex(&serde_json::to_vec(&serde_json::json!({
            "unit": name,
            "seed": seed,
            "config": subtree,
            "inputs": input_hashes,
        }))?);
        let start = Instant::now();
        let cached = self.manifest.is_fresh(&self.out, name, &key);
        if !cached {
            if let Some(old) = self.manifest.stages.remove(name) {
                for r in old.outputs.keys() {
                    let _ = std::fs::remove_file(self.path(r));
                }
                self.manifest.save(&self.out)?;
            }
            let written = body(self)?;
            let mut outputs = BTreeMap::new();
            for r in written {
                outputs.insert(r.clone(), file_sha256(&self.path(&r))?);
            }
            self.manifest.stages.insert(
                name.to_string(),
                StageEntry {
                    key,
                    seed,
                    inputs: input_hashes,
                    outputs,
                },
            );
            self.manifest.save(&self.out)?;
        }
        let outcome = StageOutcome {
            unit: name.to_string(),
            cached,
            seconds: start.elapsed().as_secs_f64(),
        };
        if !cached {
            self.timings.seconds.insert(name.to_string(), outcome.seconds);
            self.timings.save(&self.out)?;
        }
        (self.notify)(&outcome);
        self.outcomes.push(outcome);
        Ok(())
    }

    fn data_subtree(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg.data).expect("config serializes")
    }

    /// Runs one stage, optionally restricted to a single variant (only
    /// meaningful for the attack stages).
    pub fn run_stage(&mut self, stage: Stage, only: Option<Variant>) -> Result<()> {
        let variants: Vec<Variant> = match only {
            Some(v) => vec![v],
            None => self.cfg.attack.variants.clone(),
        };
        match stage {
            Stage::TrainTarget => self.train_model("target"),
            Stage::TrainEval => self.train_model("eval"),
            Stage::Distill => self.distill(),
            Stage::TrainGan => {
                for mode in self.gan_modes() {
                    self.train_gan(mode)?;
                }
                Ok(())
            }
            Stage::Invert => self.for_pairs(&variants, Self::invert),
            Stage::Evaluate => self.for_pairs(&variants, Self::evaluate),
            Stage::AnalyzeOverfit => self.for_pairs(&variants, Self::analyze_overfit),
        }
    }

    fn for_pairs(&mut self, variants: &[Variant], f: fn(&mut Self, AttackMode, Variant) -> Result<()>) -> Result<()> {
        for mode in self.cfg.attack.modes.clone() {
            for &v in variants {
                f(self, mode, v)?;
            }
        }
        Ok(())
    }

    /// All seven stages for every configured variant, then the comparison
    /// table.
    pub fn full_experiment(&mut self) -> Result<Comparison> {
        for stage in Stage::ALL {
            self.run_stage(stage, None)?;
        }
        self.compare()
    }

    fn gan_modes(&self) -> Vec<DiscMode> {
        let mut modes: Vec<DiscMode> = Vec::new();
        for m in &self.cfg.attack.modes {
            if !modes.contains(&m.disc_mode()) {
                modes.push(m.disc_mode());
            }
        }
        modes
    }

    fn train_model(&mut self, which: &str) -> Result<()> {
        let (stage, spec) = match which {
            "target" => (Stage::TrainTarget, self.cfg.target.clone()),
            _ => (Stage::TrainEval, self.cfg.eval.clone()),
        };
        let seed = self.seed_for(which);
        let subtree = serde_json::json!({ "data": self.data_subtree(), "model": spec });
        let ckpt = rel(&[which, "model.ckpt"]);
        let report = rel(&[which, "report.json"]);
        self.unit(stage, stage.name(), seed, subtree, &[], |p| {
            let (model, rep) = train_classifier(&p.split()?.private, &spec.arch, &spec.train, seed)?;
            model.save(&p.path(&ckpt))?;
            write_json(&p.path(&report), &rep)?;
            Ok(vec![ckpt.clone(), report.clone()])
        })
    }

    fn aug_paths(&self) -> Vec<String> {
        self.cfg
            .augment
            .archs
            .iter()
            .enumerate()
            .map(|(i, a)| rel(&["augment", &format!("aug{}_{}.ckpt", i + 1, a)]))
            .collect()
    }

    fn distill(&mut self) -> Result<()> {
        let seed = self.seed_for("augment");
        let spec = self.cfg.augment.clone();
        let subtree = serde_json::json!({ "data": self.data_subtree(), "augment": spec });
        let paths = self.aug_paths();
        let report = rel(&["augment", "report.json"]);
        self.unit(Stage::Distill, "distill", seed, subtree, &[rel(&["target", "model.ckpt"])], |p| {
            let teacher = Classifier::load(&p.path("target/model.ckpt"))?;
            let public = &p.split()?.public;
            let mut reports = BTreeMap::new();
            for (i, arch) in spec.archs.iter().enumerate() {
                let (student, rep) = distill(
                    &teacher,
                    public,
                    arch,
                    &spec.distill,
                    derive_indexed(seed, "student", i as u64),
                )?;
                student.save(&p.path(&paths[i]))?;
                reports.insert(paths[i].clone(), rep);
            }
            write_json(&p.path(&report), &reports)?;
            let mut out = paths.clone();
            out.push(report.clone());
            Ok(out)
        })
    }

    fn gan_dir(mode: DiscMode) -> &'static str {
        match mode {
            DiscMode::Critic => "gan/critic",
            DiscMode::Probabilistic => "gan/probabilistic",
        }
    }

    fn train_gan(&mut self, mode: DiscMode) -> Result<()> {
        let dir = Self::gan_dir(mode);
        let hyper = match mode {
            DiscMode::Critic => self.cfg.gan.critic.clone(),
            DiscMode::Probabilistic => self.cfg.gan.probabilistic.clone(),
        };
        let latent_dim = self.cfg.gan.latent_dim;
        let seed = self.seed_for(dir);
        let subtree = serde_json::json!({ "data": self.data_subtree(), "latent_dim": latent_dim, "hyper": hyper });
        let name = format!("train-gan/{}", &dir[4..]);
        self.unit(Stage::TrainGan, &name, seed, subtree, &[], |p| {
            let (g, d, rep) = train_gan(&p.split()?.public, latent_dim, mode, &hyper, seed)?;
            let files = [
                rel(&[dir, "generator.ckpt"]),
                rel(&[dir, "discriminator.ckpt"]),
                rel(&[dir, "report.json"]),
                rel(&[dir, "samples.pgm"]),
            ];
            g.save(&p.path(&files[0]))?;
            d.save(&p.path(&files[1]))?;
            write_json(&p.path(&files[2]), &rep)?;
            let z = Tensor::randn(&[64, latent_dim], 1.0, &mut rng_from_seed(derive_seed(seed, "samples")));
            write_image_grid(&p.path(&files[3]), &g.generate(&z)?, 8)?;
            Ok(files.to_vec())
        })
    }

    fn invert_dir(mode: AttackMode, variant: Variant) -> String {
        rel(&["invert", mode.name(), variant.name()])
    }

    fn invert_inputs(&self, mode: AttackMode, variant: Variant) -> Vec<String> {
        let gan = Self::gan_dir(mode.disc_mode());
        let mut inputs = vec![
            rel(&["target", "model.ckpt"]),
            rel(&[gan, "generator.ckpt"]),
            rel(&[gan, "discriminator.ckpt"]),
        ];
        if matches!(variant, Variant::Ma | Variant::Lomma) {
            inputs.extend(self.aug_paths());
        }
        inputs
    }

    fn loss_spec(&self, variant: Variant, target: &Classifier, seed: u64) -> Result<(IdentityLossSpec, Option<usize>)> {
        let a = &self.cfg.attack;
        let aug = || -> Result<Vec<Classifier>> {
            self.aug_paths().iter().map(|r| Classifier::load(&self.path(r))).collect()
        };
        let preg = || -> Result<PregEstimator> {
            let public = &self.split()?.public;
            let n = a.preg_count.unwrap_or_else(|| default_preg_count(public));
            let mut est = estimate_preg(target, public, n, derive_seed(seed, "preg-sample"))?;
            est.mode = a.preg_mode;
            Ok(est)
        };
        let gammas = |n: usize| {
            let (gt, ga) = default_gammas(n);
            (a.gamma_t.unwrap_or(gt), a.gamma_aug.unwrap_or(ga))
        };
        Ok(match variant {
            Variant::Baseline => (IdentityLossSpec::Ce, None),
            Variant::Lom => {
                let preg = preg()?;
                let n = preg.n_public_used;
                (
                    IdentityLossSpec::Logit {
                        lambda_reg: a.lambda_reg,
                        preg,
                    },
                    Some(n),
                )
            }
            Variant::Ma => {
                let models = aug()?;
                let (gamma_t, gamma_aug) = gammas(models.len());
                (
                    IdentityLossSpec::Aug {
                        base: BaseLoss::Ce,
                        gamma_t,
                        gamma_aug,
                        aug_models: models,
                    },
                    None,
                )
            }
            Variant::Lomma => {
                let models = aug()?;
                let (gamma_t, gamma_aug) = gammas(models.len());
                let preg = preg()?;
                let n = preg.n_public_used;
                (
                    IdentityLossSpec::Lomma {
                        lambda_reg: a.lambda_reg,
                        preg,
                        gamma_t,
                        gamma_aug,
                        aug_models: models,
                    },
                    Some(n),
                )
            }
        })
    }

    fn invert(&mut self, mode: AttackMode, variant: Variant) -> Result<()> {
        let dir = Self::invert_dir(mode, variant);
        let name = format!("invert/{}/{}", mode.name(), variant.name());
        // one seed per attack mode, shared by every variant
        let seed = self.seed_for(&format!("invert-{}", mode.name()));
        let a = &self.cfg.attack;
        let mut icfg = a.inversion(mode).clone();
        icfg.seed = seed;
        let subtree = serde_json::json!({
            "data": self.data_subtree(),
            "inversion": icfg,
            "candidates_per_class": a.candidates_per_class,
            "lambda_reg": a.lambda_reg,
            "preg_mode": a.preg_mode,
            "preg_count": a.preg_count,
            "gamma_t": a.gamma_t,
            "gamma_aug": a.gamma_aug,
        });
        let candidates = a.candidates_per_class;
        let inputs = self.invert_inputs(mode, variant);
        self.unit(Stage::Invert, &name, seed, subtree, &inputs, |p| {
            let target = Classifier::load(&p.path(&inputs[0]))?;
            let generator = Generator::load(&p.path(&inputs[1]))?;
            let discriminator = Discriminator::load(&p.path(&inputs[2]))?;
            if discriminator.mode != mode.disc_mode() {
                return Err(Error::invalid(format!("{} expects a {:?} discriminator", mode.label(), mode.disc_mode())));
            }
            let (spec, preg_n) = p.loss_spec(variant, &target, seed)?;
            let k = target.num_classes();
            let classes: Vec<usize> = (0..candidates * k).map(|i| i % k).collect();
            let groups: Vec<usize> = (0..candidates * k).map(|i| i / k).collect();
            let models = AttackModels {
                target: &target,
                generator: &generator,
                discriminator: &discriminator,
            };
            let inv = invert_with_restarts(&models, &spec, mode.latent(), &classes, &icfg)?;
            let files = [
                format!("{dir}/reconstructions.ckpt"),
                format!("{dir}/result.json"),
                format!("{dir}/trace.csv"),
                format!("{dir}/grid.pgm"),
            ];
            save_checkpoint(
                &p.path(&files[0]),
                "reconstructions",
                mode.name(),
                &serde_json::json!({ "mode": mode, "variant": variant }),
                seed,
                &[inv.reconstructions.clone(), inv.latents.clone()],
            )?;
            write_json(
                &p.path(&files[1]),
                &InversionRecord {
                    mode,
                    variant,
                    seed,
                    classes,
                    groups,
                    final_identity_loss: inv.final_identity_loss.clone(),
                    selected_restart: inv.selected_restart.clone(),
                    part_names: inv.part_names.clone(),
                    preg_public_images: preg_n,
                    distribution: inv.distribution.clone(),
                },
            )?;
            let mut csv = Vec::new();
            write_trace_csv(&mut csv, &inv.part_names, &inv.trace)?;
            write_atomic(&p.path(&files[2]), &csv)?;
            write_image_grid(&p.path(&files[3]), &inv.reconstructions, k)?;
            Ok(files.to_vec())
        })
    }

    fn load_recons(&self, mode: AttackMode, variant: Variant) -> Result<(Tensor, InversionRecord)> {
        let dir = Self::invert_dir(mode, variant);
        let (_, mut tensors) = load_checkpoint(&self.path(&format!("{dir}/reconstructions.ckpt")))?;
        let record: InversionRecord = read_json(&self.path(&format!("{dir}/result.json")))?;
        Ok((tensors.swap_remove(0), record))
    }

    fn evaluate(&mut self, mode: AttackMode, variant: Variant) -> Result<()> {
        let dir = Self::invert_dir(mode, variant);
        let name = format!("evaluate/{}/{}", mode.name(), variant.name());
        let out = format!("evaluate/{}/{}/report.json", mode.name(), variant.name());
        let inputs = vec![
            format!("{dir}/reconstructions.ckpt"),
            format!("{dir}/result.json"),
            rel(&["eval", "model.ckpt"]),
        ];
        let seed = self.seed_for(&format!("invert-{}", mode.name()));
        let subtree = serde_json::json!({ "data": self.data_subtree() });
        self.unit(Stage::Evaluate, &name, seed, subtree, &inputs, |p| {
            let eval_model = Classifier::load(&p.path(&inputs[2]))?;
            let (recons, rec) = p.load_recons(mode, variant)?;
            let report = p.attack_report(mode, variant, &recons, &rec, &eval_model)?;
            write_json(&p.path(&out), &report)?;
            Ok(vec![out.clone()])
        })
    }

    fn attack_report(
        &self,
        mode: AttackMode,
        variant: Variant,
        recons: &Tensor,
        rec: &InversionRecord,
        eval_model: &Classifier,
    ) -> Result<AttackReport> {
        let split = self.split()?;
        let top1 = attack_accuracy(recons, &rec.classes, &rec.groups, eval_model, 1)?;
        let top5 = attack_accuracy(recons, &rec.classes, &rec.groups, eval_model, 5)?;
        let logits = eval_model.predict_logits(recons, 256)?;
        let hits = topk_hits(&logits, &rec.classes, 1);
        let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (&k, &h) in rec.classes.iter().zip(&hits) {
            let e = per_class.entry(split.dense_to_raw[k]).or_default();
            e.0 += 1;
            e.1 += h as usize;
        }
        let knn = knn_dist_per_sample(recons, &rec.classes, &split.private, eval_model)?;
        let mut seeds = BTreeMap::new();
        seeds.insert("master".to_string(), self.cfg.seed);
        seeds.insert("inversion".to_string(), rec.seed);
        let report = AttackReport {
            mode: mode.name().into(),
            variant: variant.name().into(),
            latent: match mode.latent() {
                crate::invert::LatentKind::PointEstimate => "point_estimate".into(),
                crate::invert::LatentKind::DiagonalGaussian => "diagonal_gaussian".into(),
            },
            top1,
            top5,
            per_class_top1: per_class
                .into_iter()
                .map(|(c, (n, h))| (c, 100.0 * h as f64 / n as f64))
                .collect(),
            knn_dist: knn.iter().sum::<f64>() / knn.len() as f64,
            overfit_fraction: None,
            overfit_tau_low: None,
            overfit_tau_high: None,
            n_reconstructions: rec.classes.len(),
            config_hash: self.cfg.hash(),
            seeds,
        };
        report.check()?;
        Ok(report)
    }

    /// The variant whose losses fix default thresholds: the baseline when it
    /// is part of the run.
    fn threshold_source(&self, variant: Variant) -> Variant {
        if self.cfg.attack.variants.contains(&Variant::Baseline) {
            Variant::Baseline
        } else {
            variant
        }
    }

    fn analyze_overfit(&mut self, mode: AttackMode, variant: Variant) -> Result<()> {
        let name = format!("analyze-overfit/{}/{}", mode.name(), variant.name());
        let dir = format!("analyze-overfit/{}/{}", mode.name(), variant.name());
        let source = self.threshold_source(variant);
        let mut inputs = vec![rel(&["target", "model.ckpt"]), rel(&["eval", "model.ckpt"])];
        for v in [variant, source] {
            let d = Self::invert_dir(mode, v);
            for f in ["reconstructions.ckpt", "result.json"] {
                let r = format!("{d}/{f}");
                if !inputs.contains(&r) {
                    inputs.push(r);
                }
            }
        }
        let seed = self.seed_for(&format!("invert-{}", mode.name()));
        let thresholds = self.cfg.analysis;
        let subtree = serde_json::json!({ "analysis": thresholds, "thresholds_from": source });
        self.unit(Stage::AnalyzeOverfit, &name, seed, subtree, &inputs, |p| {
            let a = Classifier::load(&p.path(&inputs[0]))?;
            let b = Classifier::load(&p.path(&inputs[1]))?;
            let (src_recons, src_rec) = p.load_recons(mode, source)?;
            let base = overfit_analysis(&src_recons, &src_rec.classes, &a, &b, thresholds)?;
            let fixed = Thresholds {
                tau_low: Some(base.tau_low),
                tau_high: Some(base.tau_high),
            };
            let (recons, rec) = p.load_recons(mode, variant)?;
            let res = overfit_analysis(&recons, &rec.classes, &a, &b, fixed)?;
            let files = [format!("{dir}/pairs.csv"), format!("{dir}/summary.json")];
            write_pairs_csv(&p.path(&files[0]), &rec.classes, &res.pairs)?;
            write_json(
                &p.path(&files[1]),
                &OverfitSummary {
                    tau_low: res.tau_low,
                    tau_high: res.tau_high,
                    fraction_low_high: res.fraction_low_high,
                    n: res.pairs.len(),
                    thresholds_from: source,
                },
            )?;
            Ok(files.to_vec())
        })
    }

    /// Merges the evaluation and overfitting outputs into final reports and
    /// the side-by-side table.
    pub fn compare(&mut self) -> Result<Comparison> {
        let mut inputs = Vec::new();
        let pairs: Vec<(AttackMode, Variant)> = self
            .cfg
            .attack
            .modes
            .iter()
            .flat_map(|&m| self.cfg.attack.variants.iter().map(move |&v| (m, v)))
            .collect();
        for &(m, v) in &pairs {
            inputs.push(format!("evaluate/{}/{}/report.json", m.name(), v.name()));
            inputs.push(format!("analyze-overfit/{}/{}/summary.json", m.name(), v.name()));
        }
        let seed = self.cfg.seed;
        let files = ["compare/reports.json", "compare/table.csv", "compare/table.md"].map(String::from);
        self.unit(Stage::AnalyzeOverfit, "compare", seed, serde_json::Value::Null, &inputs, |p| {
            let mut reports = Vec::new();
            for (i, _) in pairs.iter().enumerate() {
                let mut r: AttackReport = read_json(&p.path(&inputs[2 * i]))?;
                let s: OverfitSummary = read_json(&p.path(&inputs[2 * i + 1]))?;
                r.overfit_fraction = Some(s.fraction_low_high);
                r.overfit_tau_low = Some(s.tau_low);
                r.overfit_tau_high = Some(s.tau_high);
                reports.push(r);
            }
            let cmp = Comparison::from_reports(reports);
            write_json(&p.path(&files[0]), &cmp.reports)?;
            write_atomic(&p.path(&files[1]), cmp.to_csv()?.as_bytes())?;
            write_atomic(&p.path(&files[2]), cmp.to_markdown().as_bytes())?;
            Ok(files.to_vec())
        })?;
        let reports: Vec<AttackReport> = read_json(&self.path(&files[0]))?;
        Ok(Comparison::from_reports(reports))
    }
}
