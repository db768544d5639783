//! Masked token recovery and the quartette classification losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::TransformerParams;
use crate::encoding::{TokenId, TokenSequence, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Fraction of eligible text tokens replaced by `[MASK]`.
pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub masked_sequence: TokenSequence,
    pub masked_positions: Vec<usize>,
    pub original_ids: Vec<TokenId>,
}

/// Which field, if any, of a quartette was swapped for another example's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuartetteLabel {
    Matched = 0,
    PollutedImage = 1,
    PollutedQuestion = 2,
    PollutedAnswer = 3,
}

impl QuartetteLabel {
    pub const ALL: [QuartetteLabel; 4] = [
        Self::Matched,
        Self::PollutedImage,
        Self::PollutedQuestion,
        Self::PollutedAnswer,
    ];

    pub fn class(self) -> usize {
        self as usize
    }

    pub fn from_class(c: usize) -> Option<Self> {
        Self::ALL.get(c).copied()
    }

    /// Target index under a classifier with `num_classes` outputs; the
    /// 2-way variant collapses every pollution into class 1.
    pub fn target(self, num_classes: usize) -> usize {
        match num_classes {
            2 => usize::from(self != Self::Matched),
            _ => self.class(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Masked-token and contrastive losses with equal weight.
    Both,
    /// Contrastive loss alone; the masked-token loss is reported but not trained.
    Ccl4Only,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cmtl: f64,
    pub ccl4: f64,
    pub total: f64,
}

pub fn total_loss(cmtl: f64, ccl4: f64, phase: Phase) -> LossBreakdown {
    let total = match phase {
        Phase::Both => cmtl + ccl4,
        Phase::Ccl4Only => ccl4,
    };
    LossBreakdown { cmtl, ccl4, total }
}

/// The tape node to differentiate for `phase`.
pub fn objective<T: Scalar>(tape: &mut Tape<T>, cmtl: Var, ccl4: Var, phase: Phase) -> Result<Var> {
    match phase {
        Phase::Both => tape.add(cmtl, ccl4),
        Phase::Ccl4Only => Ok(ccl4),
    }
}

/// Masks each text token independently with probability `rate`. Region slots
/// and reserved markers are never masked. When no token is drawn, one
/// eligible token is masked uniformly at random.
pub fn apply_token_masking<R: Rng + ?Sized>(seq: &TokenSequence, rate: f64, rng: &mut R) -> Result<MaskedBatch> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid(format!("mask rate {rate} outside [0,1]")));
    }
    let eligible: Vec<usize> = seq.text_positions().collect();
    if eligible.is_empty() {
        return Err(invalid("sequence has no maskable text token"));
    }
    let mut positions: Vec<usize> = eligible.iter().copied().filter(|_| rng.random::<f64>() < rate).collect();
    if positions.is_empty() {
        positions.push(eligible[rng.random_range(0..eligible.len())]);
    }
    let mut masked_sequence = seq.clone();
    let original_ids = positions.iter().map(|&p| seq.token_ids[p]).collect();
    for &p in &positions {
        masked_sequence.token_ids[p] = Vocabulary::MASK;
    }
    Ok(MaskedBatch {
        masked_sequence,
        masked_positions: positions,
        original_ids,
    })
}

/// Mean cross-entropy of the token head at the masked positions only.
pub fn cmtl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &TransformerParams<T>,
    hidden: Var,
    masked: &MaskedBatch,
) -> Result<Var> {
    let n = tape.shape(hidden)[0];
    if let Some(&bad) = masked.masked_positions.iter().find(|&&p| p >= n) {
        return Err(Error::Index {
            what: "masked position",
            index: bad,
            bound: n,
        });
    }
    let rows = tape.gather_rows(hidden, &masked.masked_positions)?;
    let w = tape.param(&params.store, params.token_head.weight);
    let b = tape.param(&params.store, params.token_head.bias);
    let logits = tape.matmul(rows, w)?;
    let logits = tape.add_row(logits, b)?;
    let targets: Vec<usize> = masked.original_ids.iter().map(|&t| t as usize).collect();
    tape.cross_entropy(logits, &targets)
}

/// Fully connected classifier on the `[CLS]` encoding; returns `[1 × classes]` logits.
pub fn ccl4_head<T: Scalar>(tape: &mut Tape<T>, params: &TransformerParams<T>, hidden: Var) -> Result<Var> {
    let cls = tape.gather_rows(hidden, &[0])?;
    let w = tape.param(&params.store, params.contrastive_head.weight);
    let b = tape.param(&params.store, params.contrastive_head.bias);
    let logits = tape.matmul(cls, w)?;
    tape.add_row(logits, b)
}

pub fn ccl4_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, label: QuartetteLabel) -> Result<Var> {
    let classes = tape.shape(logits).last().copied().unwrap_or(0);
    tape.cross_entropy(logits, &[label.target(classes)])
}
