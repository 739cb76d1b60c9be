//! Structured pruning for vision transformers: graph-based attention-head
//! ranking followed by augmented-Lagrangian soft pruning toward head- and
//! column-level sparsity, hard compaction and fine-tuning.

pub mod data;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod optimizer;
pub mod ranking;
pub mod sparsity;
pub mod vit;

pub use error::{Error, Result};
