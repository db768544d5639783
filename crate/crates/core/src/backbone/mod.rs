//! The stacked self-attention encoder, its parameters, and the attention mask.

mod config;
mod forward;
mod mask;
mod params;

pub use config::ModelConfig;
pub use forward::{attention, embed, encode, forward_sequence, transformer_block};
pub use mask::{build_attention_mask, AttentionMask, Bidirectional, MaskStrategy};
pub use params::{EmbeddingIds, HeadIds, LinearIds, NormIds, TransformerBlock, TransformerParams};
