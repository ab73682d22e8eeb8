//! Parameterized networks: the ConvK classifier family, its training and
//! distillation, and the shared checkpoint format.

mod checkpoint;
mod classifier;
mod distill;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use classifier::{Classifier, ClassifierArch};
pub use distill::{distill, mean_kl, DistillConfig, DistillReport};
pub use train::{accuracy, train_classifier, TrainHyper, TrainReport};

use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Anything with a flat, ordered parameter list.
pub trait Parameterized {
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];

    /// Puts every parameter on `tape`, as trainable leaves or constants.
    fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params()
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }
}

/// He-normal weights for a layer with `fan_in` inputs.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Contiguous minibatch index lists over a seeded permutation.
pub(crate) fn minibatches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}
