use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub image_size: usize,
    pub embed_dim: usize,
    pub num_layers_video: usize,
    pub num_layers_text: usize,
    /// Trailing text-encoder layers that receive video cross-attention.
    pub num_fusion_layers: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    /// Number of learnable temporal positions.
    pub max_frames: usize,
    pub max_text_len: usize,
    pub proj_dim: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            image_size: 32,
            embed_dim: 64,
            num_layers_video: 4,
            num_layers_text: 4,
            num_fusion_layers: 3,
            num_heads: 4,
            vocab_size: 1024,
            max_frames: 45,
            max_text_len: 32,
            proj_dim: 128,
            mlp_ratio: 4,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Smallest useful configuration; used by gradient checks and the
    /// synthetic end-to-end run.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 16,
            num_layers_video: 2,
            num_layers_text: 2,
            num_fusion_layers: 1,
            num_heads: 2,
            max_text_len: 16,
            proj_dim: 16,
            ..Self::default()
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches_per_frame(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_fusion_layers < 1 || self.num_fusion_layers > self.num_layers_text {
            return fail(format!(
                "num_fusion_layers {} must lie in 1..={}",
                self.num_fusion_layers, self.num_layers_text
            ));
        }
        if self.max_frames == 0 || self.max_text_len < 3 || self.proj_dim == 0 || self.mlp_ratio == 0 {
            return fail("max_frames, proj_dim and mlp_ratio must be positive; max_text_len ≥ 3".into());
        }
        if self.vocab_size <= crate::model::tokenizer::NUM_SPECIAL {
            return fail(format!("vocab_size {} leaves no regular tokens", self.vocab_size));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().num_fusion_layers, 3);
        assert_eq!(ModelConfig::default().proj_dim, 128);
    }

    #[test]
    fn invariants_are_enforced() {
        let bad_heads = ModelConfig {
            num_heads: 3,
            ..ModelConfig::tiny()
        };
        assert!(bad_heads.validate().is_err());
        let bad_patch = ModelConfig {
            image_size: 30,
            ..ModelConfig::tiny()
        };
        assert!(bad_patch.validate().is_err());
        let bad_fusion = ModelConfig {
            num_fusion_layers: 3,
            ..ModelConfig::tiny()
        };
        assert!(bad_fusion.validate().is_err());
        let no_fusion = ModelConfig {
            num_fusion_layers: 0,
            ..ModelConfig::tiny()
        };
        assert!(no_fusion.validate().is_err());
    }
}
