//! Losses, the Adam optimiser and the GAN training loop.

mod adam;
mod losses;
mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use losses::{
    adversarial_losses, d_loss, g_loss, masked_r1, masked_r1_from_logits, perceptual_loss, FeatureExtractor,
    IdentityExtractor, RandomConvExtractor,
};
pub use trainer::{Batch, ExtractorKind, LossConfig, StepMetrics, Trainer, CSV_HEADER};
