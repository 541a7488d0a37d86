//! Minimal vision transformer backbone.

mod checkpoint;
mod config;
pub mod model;
mod params;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, Provenance,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub(crate) use checkpoint::check_magic;
pub use config::ViTConfig;
pub use model::{
    attention, block_forward, concat_tokens, extract_patches, head_forward, patch_embed,
    AttentionState, Forward, SegmentMap, TokenSequence,
};
pub use params::{
    head_shapes, init_params, init_tensor, is_backbone, parameter_shapes, Binder, ParamStore,
    TrainableMask,
};

use crate::error::Result;
use crate::tensor::Tensor;

/// Logits `[B × classes]` of the plain backbone. `taus`, when given, holds
/// one attention temperature per block.
pub fn vit_forward(
    config: &ViTConfig,
    params: &ParamStore,
    images: &Tensor,
    taus: Option<&[f64]>,
) -> Result<Tensor> {
    config.validate()?;
    let mask = TrainableMask::none();
    let mut fwd = Forward::new(Binder::new(params, &mask), config);
    let logits = model::encode(&mut fwd, images, taus)?;
    Ok((*logits.value()).clone())
}
