use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_eps() -> f64 {
    1e-6
}

/// Backbone geometry. Images are square `image_size × image_size × channels`
/// and are cut into non-overlapping `patch_size` squares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl ViTConfig {
    /// The desk-scale configuration used throughout the tests: 32×32×3
    /// images, 8×8 patches, D=64, 6 blocks, 4 heads, 10 classes.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            num_blocks: 6,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            layer_norm_eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_geometry() {
        let c = ViTConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 16);
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.patch_dim(), 192);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = ViTConfig::toy();
        c.num_blocks = 0;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::toy();
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::toy();
        c.num_heads = 5;
        assert!(c.validate().is_err());
    }
}
