//! Graph-masked quasi-attention for multimodal question answering.
//!
//! Text and image inputs are turned into graphs, the graphs into additive
//! `{0, -inf}` masks, and the masks are composed block-wise into one mask `G`
//! over the fused token sequence. Each attention head then computes
//! `softmax(QKᵀ/√d_head + G + λĜ)V`, where `Ĝ` is a trainable per-head bias
//! and `G` stays fixed.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod mask;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
