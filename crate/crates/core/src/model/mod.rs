//! The factorized encoder/decoder, the logit-space discriminator, and the
//! architecture variants used for the factorization ablation.

mod discriminator;
mod fan;
mod layers;

pub use discriminator::Discriminator;
pub use fan::{EncoderOutput, FanModel, FanVars, LatentSplit, Variant, LATENT_DIM};
pub use layers::Mode;

/// Rows per chunk when evaluating large sets without a training graph.
pub(crate) const EVAL_CHUNK: usize = 256;
