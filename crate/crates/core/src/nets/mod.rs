//! Attention building blocks and the causal action-decoder backbone.

mod backbone;
pub mod layers;

pub use backbone::{
    backbone_hidden, decode_batch, decode_episode, init_backbone, output_head,
    output_head_frozen, pool_episode,
    BatchDecode, EpisodeTokens, NetConfig, BACKBONE,
};
pub use layers::{
    multi_head_attention, scaled_dot_attention, transformer_block, Masking, Segment,
};
