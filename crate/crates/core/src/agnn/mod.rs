//! The attentional graph network.
//!
//! Descriptors are first fused with an MLP lift of their normalized
//! positions. Each of the `L` layers then runs an intra-subgraph attention
//! block (each subgraph attends to itself) followed by an inter-subgraph
//! block (each attends to the other). Both subgraphs are updated
//! simultaneously from the pre-step values, and every update is residual:
//! `x ← x + MLP([x ‖ m])`.

pub mod checkpoint;
pub mod network;
pub mod params;

pub use network::{
    attention_block, attention_on_graph, encode_and_fuse, encode_on_graph, forward_on_graph, pgat_forward, register,
    SubgraphTensor,
};
pub use params::{expected_shapes, AttentionBlock, Layer, Model, ModelDims, ModelParams, POS_ENCODER_HIDDEN};
