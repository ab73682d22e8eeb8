//! Model-inversion attack laboratory.
//!
//! The crate trains small classifiers on a class-disjoint private/public
//! split, fits a GAN prior on the public half, distils augmented models and
//! then inverts the target model through the generator's latent space with
//! cross-entropy, logit-maximization and model-augmented identity losses.

pub mod data;
pub mod error;
pub mod eval;
pub mod gan;
pub mod invert;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
