//! Knowledge distillation of augmented models on public images.
//!
//! Only the teacher's soft outputs are matched; public labels live in a
//! different label space and never enter the loss.

use serde::{Deserialize, Serialize};

use super::{minibatches, Classifier, ClassifierArch, Parameterized};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{Optimizer, OptimizerKind, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_frac: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 1.0,
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            holdout_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub initial_holdout_kl: f64,
    pub final_holdout_kl: f64,
    pub epoch_train_kl: Vec<f64>,
    pub epoch_holdout_kl: Vec<f64>,
}

fn softmax_rows(logits: &Tensor, tau: f64) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - mx) / tau).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// `mean_i KL(q_t,i ‖ softmax(s_i/τ))` with `q_t` fixed.
fn kl_term<'t>(teacher_probs: Var<'t>, student_logits: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let n = student_logits.shape()[0] as f64;
    let log_q = student_logits.scale(1.0 / tau).log_softmax();
    let q = teacher_probs.value();
    let entropy_part: f64 = q.data().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    let cross = teacher_probs.mul(log_q)?.sum();
    Ok(cross.neg().add_scalar(entropy_part).scale(1.0 / n))
}

/// Mean KL(teacher ‖ student) at temperature `tau` over `images`.
pub fn mean_kl(teacher: &Classifier, student: &Classifier, images: &Tensor, tau: f64) -> Result<f64> {
    let tq = softmax_rows(&teacher.predict_logits(images, 256)?, tau);
    let sl = student.predict_logits(images, 256)?;
    let tape = Tape::new();
    Ok(kl_term(tape.constant(tq), tape.constant(sl), tau)?.item())
}

pub fn distill(
    teacher: &Classifier,
    public: &Dataset,
    student_arch: &str,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(Classifier, DistillReport)> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    if public.is_empty() {
        return Err(Error::invalid("distillation needs a nonempty public dataset"));
    }
    let arch = ClassifierArch::from_tag(student_arch, public.image_shape(), teacher.num_classes())?;
    if arch.num_classes != teacher.num_classes() || arch.in_channels != teacher.arch.in_channels {
        return Err(Error::shape(
            "distill",
            format!("student {arch:?} incompatible with teacher {:?}", teacher.arch),
        ));
    }
    let mut student = Classifier::new(arch, derive_seed(seed, "init"));
    let (train, holdout) = public.split_holdout(cfg.holdout_frac, derive_seed(seed, "holdout"))?;
    let tau = cfg.temperature;
    let teacher_train = softmax_rows(&teacher.predict_logits(train.images(), 256)?, tau);

    let mut report = DistillReport {
        initial_holdout_kl: mean_kl(teacher, &student, holdout.images(), tau)?,
        ..Default::default()
    };
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.learning_rate);
    let mut rng = rng_from_seed(derive_seed(seed, "batches"));
    let mut iteration = 0;
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut count = 0;
        for idx in minibatches(train.len(), cfg.batch_size, &mut rng) {
            let (x, _) = train.batch(&idx)?;
            let tq = teacher_train.select_outer(&idx)?;
            let tape = Tape::new();
            let p = student.bind(&tape, true);
            let logits = student.logits(&p, tape.constant(x))?;
            let loss = kl_term(tape.constant(tq), logits, tau)?;
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    detail: format!("distillation KL = {lv}"),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<_> = p.iter().map(|v| grads.get_or_zeros(*v)).collect();
            opt.step(student.params_mut(), &g)?;
            sum += lv * idx.len() as f64;
            count += idx.len();
            iteration += 1;
        }
        report.epoch_train_kl.push(sum / count as f64);
        report
            .epoch_holdout_kl
            .push(mean_kl(teacher, &student, holdout.images(), tau)?);
    }
    report.final_holdout_kl = report
        .epoch_holdout_kl
        .last()
        .copied()
        .unwrap_or(report.initial_holdout_kl);
    Ok((student, report))
}
