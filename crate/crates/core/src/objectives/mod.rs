//! Classification and contrastive heads, and the training losses.

pub mod heads;
pub mod losses;

pub use heads::{argmax, classify_logits, contrastive_project, ClassifierHead, HeadActivation, ProjectionHead};
pub use losses::{
    aux_modality_loss, focal_loss, inverse_frequency_alpha, supcon_loss, total_loss, AuxHead, LossComponents,
    LossWeights, SupConOptions,
};
