//! A small vision transformer with per-head weight addressing.

pub mod checkpoint;
mod config;
mod count;
mod forward;
mod weights;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use config::{VitConfig, IN_CHANNELS, LN_EPS};
pub use count::{count_block_flops, count_flops, count_params, count_params_for, BlockShape, StructuralMask};
pub use forward::{
    extract_patches, forward, forward_per_head, logits, loss, loss_and_gradients, tape_forward, BlockVars, HeadCapture,
    ModelVars,
};
pub use weights::{BlockWeights, ModelWeights};
