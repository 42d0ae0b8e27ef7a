//! The plain vision transformer backbone.

pub mod config;
pub mod forward;
pub mod layers;
pub mod params;

pub use config::ViTConfig;
pub use forward::{vit_forward, ForwardOutput};
pub use layers::{ffn_block, mhsa_block, patch_embed, patchify, transformer_block, AttentionMap};
pub use params::{LayerParams, LayerWeights, ModelParams, StemWeights, ViTWeights};
