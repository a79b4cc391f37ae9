//! Fusion backbone: modality fusion, encoder, pooling and experts.

pub mod amf;
pub mod moe;
pub mod pool;
pub mod transformer;

pub use amf::{amf_fuse, amf_weights, AmfOptions, AmfVars, AmfWeights, ClassCondition};
pub use moe::{expert_diversity_loss, expert_forward, moe_forward, DiversityMode, ExpertVars, MoeOutput, MoeVars};
pub use pool::mean_pool;
pub use transformer::{transformer_encode, EncoderLayerVars, EncoderOptions, EncoderTrace};
