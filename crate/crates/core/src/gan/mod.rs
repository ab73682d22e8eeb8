//! Generator/discriminator pair trained on public data, and the two
//! discriminator-derived prior losses used during inversion.

mod nets;
mod train;

pub use nets::{DiscMode, Discriminator, DiscriminatorArch, Generator, GeneratorArch, PROB_EPS};
pub use train::{gradient_penalty, train_gan, GanHyper, GanReport};

use crate::error::Result;
use crate::tensor::Var;

/// Per-sample prior loss `[n]`: `-D(x)` for a critic, `-log D(x)` with
/// `D(x)` clamped to `[ε, 1-ε]` for a probabilistic discriminator.
pub fn prior_loss_per_sample<'t>(
    disc: &Discriminator,
    params: &[Var<'t>],
    image: Var<'t>,
) -> Result<Var<'t>> {
    let score = disc.score(params, image)?;
    Ok(match disc.mode {
        DiscMode::Critic => score.neg(),
        // -log σ(s) = softplus(-s); clamping the loss is clamping D
        DiscMode::Probabilistic => score
            .neg()
            .softplus()
            .clamp(-(1.0 - PROB_EPS).ln(), -PROB_EPS.ln()),
    })
}

/// Batch-mean prior loss.
pub fn prior_loss<'t>(disc: &Discriminator, params: &[Var<'t>], image: Var<'t>) -> Result<Var<'t>> {
    Ok(prior_loss_per_sample(disc, params, image)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameterized;
    use crate::tensor::{Tape, Tensor};

    fn disc_with_score(mode: DiscMode, score: f64) -> Discriminator {
        let mut d = Discriminator::new(DiscriminatorArch::for_image([1, 8, 8]), mode, 0);
        let last = d.params().len() - 1;
        for (i, p) in d.params_mut().iter_mut().enumerate() {
            let v = if i == last { score } else { 0.0 };
            p.data_mut().iter_mut().for_each(|x| *x = v);
        }
        d
    }

    fn loss(mode: DiscMode, score: f64) -> f64 {
        let d = disc_with_score(mode, score);
        let tape = Tape::new();
        let p = d.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        prior_loss(&d, &p, x).unwrap().item()
    }

    #[test]
    fn probabilistic_half_gives_ln2() {
        assert!((loss(DiscMode::Probabilistic, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn critic_is_negated_score() {
        assert!((loss(DiscMode::Critic, 1.3) + 1.3).abs() < 1e-15);
    }

    #[test]
    fn probabilistic_loss_vanishes_from_above() {
        let l = loss(DiscMode::Probabilistic, 10.0);
        assert!(l > 0.0 && l < 1e-4);
        // saturates at the clamp
        assert!((loss(DiscMode::Probabilistic, 100.0) + (1.0 - PROB_EPS).ln()).abs() < 1e-15);
    }

    #[test]
    fn monotone_in_score() {
        for mode in [DiscMode::Critic, DiscMode::Probabilistic] {
            let ls: Vec<f64> = [-3.0, -1.0, 0.0, 0.5, 2.0].iter().map(|&s| loss(mode, s)).collect();
            assert!(ls.windows(2).all(|w| w[1] < w[0]), "{mode:?}: {ls:?}");
        }
    }
}
