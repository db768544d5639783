use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub visual_dim: usize,
    pub regions_per_image: usize,
    /// Output width of the quartette classifier: 4 for the full objective,
    /// 2 for the matched/unmatched ablation.
    pub contrastive_classes: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            num_heads: 2,
            hidden_dim: 64,
            ffn_dim: 128,
            vocab_size: 200,
            max_positions: 256,
            visual_dim: 32,
            regions_per_image: 8,
            contrastive_classes: 4,
            layer_norm_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    /// The 12-block, 12-head, 768-wide encoder with 36 regions of 2048-d features.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            num_blocks: 12,
            num_heads: 12,
            hidden_dim: 768,
            ffn_dim: 3072,
            vocab_size,
            max_positions: 512,
            visual_dim: 2048,
            regions_per_image: 36,
            contrastive_classes: 4,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_heads,
            self.hidden_dim,
            self.ffn_dim,
            self.vocab_size,
            self.max_positions,
            self.visual_dim,
        ];
        if dims.contains(&0) {
            return Err(invalid(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(invalid(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !matches!(self.contrastive_classes, 2 | 4) {
            return Err(invalid("contrastive_classes must be 2 or 4"));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(invalid("layer_norm_eps must be positive"));
        }
        Ok(())
    }
}
