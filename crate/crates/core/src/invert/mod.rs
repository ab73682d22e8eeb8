//! Latent-space inversion: recover class-representative images from a
//! target classifier through a public generator.

mod engine;
mod latent;
mod loss;
mod preg;

pub use engine::{invert, invert_with_restarts, write_trace_csv, AttackModels, Inversion, InversionConfig, TraceRow};
pub use latent::{sample_latent, LatentDistribution, LatentKind, LOG_SIGMA_MAX};
pub use loss::{
    default_gammas, identity_loss_ce, identity_loss_logit, BaseLoss, BoundModels, IdentityLossSpec, LossTerms,
};
pub use preg::{default_preg_count, estimate_preg, PregEstimator, PregMode};
