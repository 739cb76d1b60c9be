//! Dense tensors, deterministic kernels and a gradient tape.

pub mod kernels;
pub mod tape;
mod tensor;

pub use kernels::{
    cross_entropy_loss, gelu, layer_norm, matmul, matmul_nt, matmul_tn, multi_head_attention, softmax_rows, HeadLayout,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
