use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a vision transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl ViTConfig {
    /// Desk-scale default: 32×32 grey images, 8-pixel patches, 4 blocks of
    /// width 64 with 4 heads.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    /// ViT-B/16 at 224×224.
    pub fn vit_b16() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.channels,
            self.patch_size,
            self.depth,
            self.dim,
            self.heads,
            self.mlp_ratio,
        ];
        if positive.contains(&0) {
            return Err(Error::Config(format!("zero-valued geometry in {self:?}")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `m`.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the single CLS token.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::tiny()
    }
}
