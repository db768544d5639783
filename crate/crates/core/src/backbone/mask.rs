use crate::autodiff::Tensor;
use crate::encoding::TokenSequence;
use crate::scalar::Scalar;

/// Square self-attention mask: entry (i, j) is 0 when position i may attend
/// to position j and −∞ otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Builds a mask from a predicate; the diagonal is always allowed.
    pub fn from_fn(size: usize, mut allow: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                allowed.push(i == j || allow(i, j));
            }
        }
        Self { size, allowed }
    }

    /// Every real position attends to every real position; the trailing
    /// `padding_len` positions are cut off in both directions.
    pub fn bidirectional(real_len: usize, padding_len: usize) -> Self {
        Self::from_fn(real_len + padding_len, |i, j| i < real_len && j < real_len)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { T::zero() } else { T::neg_infinity() })
            .collect();
        Tensor::new(vec![self.size, self.size], data).expect("square mask")
    }
}

/// Strategy for deriving an attention mask from a packed sequence.
pub trait MaskStrategy: Send + Sync {
    fn build(&self, seq: &TokenSequence, padding_len: usize) -> AttentionMask;
}

/// Full bidirectional attention over real tokens; padding is unreachable.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bidirectional;

impl MaskStrategy for Bidirectional {
    fn build(&self, seq: &TokenSequence, padding_len: usize) -> AttentionMask {
        AttentionMask::bidirectional(seq.len(), padding_len)
    }
}

pub fn build_attention_mask(seq: &TokenSequence, padding_len: usize) -> AttentionMask {
    Bidirectional.build(seq, padding_len)
}
