//! Differentiable numeric primitives and transformer building blocks.

mod graph;
pub mod kernels;
mod layers;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{
    causal_mask, conv1d_subsample, multi_head_attention, sinusoidal_positions, transformer_block,
    AttentionConfig, AttentionParams, ConvSubsample, LayerNorm, Linear, TransformerBlock,
    CONV_KERNEL, LAYER_NORM_EPS,
};
pub use tensor::{GradTensor, ParamId, ParamStore, Tensor};
