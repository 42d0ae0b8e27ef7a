use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels_in: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    pub num_classes: usize,
}

fn default_ffn_ratio() -> usize {
    4
}

impl ViTConfig {
    /// Desk-scale default: 32px images, 8px patches, 8 layers of width 64.
    pub fn toy() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels_in: 1,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 8,
            ffn_ratio: 4,
            num_classes: 4,
        }
    }

    /// DeiT-S geometry (224px, patch 16, width 384, 6 heads, 12 layers).
    pub fn deit_small() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels_in: 3,
            embed_dim: 384,
            num_heads: 6,
            num_layers: 12,
            ffn_ratio: 4,
            num_classes: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels_in", self.channels_in),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("ffn_ratio", self.ffn_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("config field {name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::contract(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::contract(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image tokens, excluding the class token.
    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// All tokens including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Flattened length of one patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels_in
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.ffn_ratio
    }
}
