use serde::{Deserialize, Serialize};

use super::{minibatches, Classifier, ClassifierArch, Parameterized};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{Optimizer, OptimizerKind, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_frac: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 3,
            batch_size: 64,
            learning_rate: 1e-3,
            holdout_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub holdout_accuracy: Vec<f64>,
}

impl TrainReport {
    pub fn final_holdout_accuracy(&self) -> Option<f64> {
        self.holdout_accuracy.last().copied()
    }
}

/// Top-1 accuracy of `model` on `data`, as a fraction.
pub fn accuracy(model: &Classifier, data: &Dataset) -> Result<f64> {
    let logits = model.predict_logits(data.images(), 256)?;
    let k = model.num_classes();
    let correct = data
        .labels()
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Supervised training with Adam on softmax cross-entropy. Labels must be
/// dense in `0..K`. A seeded fraction of `dataset` is held out for the
/// accuracy trace.
pub fn train_classifier(
    dataset: &Dataset,
    arch_tag: &str,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Classifier, TrainReport)> {
    let k = dataset.num_classes();
    if dataset.class_set().iter().copied().ne(0..k) {
        return Err(Error::invalid(format!(
            "labels must be dense in 0..{k}, got {:?}",
            dataset.class_set()
        )));
    }
    let arch = ClassifierArch::from_tag(arch_tag, dataset.image_shape(), k)?;
    let mut model = Classifier::new(arch, derive_seed(seed, "init"));
    let (train, holdout) = dataset.split_holdout(hyper.holdout_frac, derive_seed(seed, "holdout"))?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), hyper.learning_rate);
    let mut rng = rng_from_seed(derive_seed(seed, "batches"));
    let mut report = TrainReport::default();
    let mut iteration = 0;

    for _ in 0..hyper.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in minibatches(train.len(), hyper.batch_size, &mut rng) {
            let (x, y) = train.batch(&idx)?;
            let tape = Tape::new();
            let p = model.bind(&tape, true);
            let loss = model.logits(&p, tape.constant(x))?.cross_entropy(&y)?;
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    detail: format!("classifier cross-entropy = {lv}"),
                });
            }
            let grads = tape.backward(loss)?;
            let g: Vec<_> = p.iter().map(|v| grads.get_or_zeros(*v)).collect();
            opt.step(model.params_mut(), &g)?;
            loss_sum += lv;
            batches += 1;
            iteration += 1;
        }
        report.epoch_loss.push(loss_sum / batches.max(1) as f64);
        report.train_accuracy.push(accuracy(&model, &train)?);
        report.holdout_accuracy.push(accuracy(&model, &holdout)?);
    }
    Ok((model, report))
}
