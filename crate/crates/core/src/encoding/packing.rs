//! Packs one (regions, caption, history, question, candidate) tuple into the
//! flat input layout
//!
//! `[CLS] o_1 … o_k [SEP] caption [HIS] Q_1 A_1 … [HIS] Q_n A_n [QUES] question [ANS] answer [SEP]`
//!
//! Segment 0 covers `[CLS]` through the first `[SEP]`; everything after is segment 1.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::vocab::{TokenId, Tokenizer, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DialogTurn {
    pub question: String,
    pub answer: String,
}

impl DialogTurn {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Boundaries {
    pub cls: usize,
    pub image_sep: usize,
    pub his: Vec<usize>,
    pub ques: usize,
    pub ans: usize,
    pub end_sep: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// Region slots hold [`Vocabulary::PAD`]; their embedding comes from the region features.
    pub token_ids: Vec<TokenId>,
    pub segment_ids: Vec<u8>,
    pub position_ids: Vec<usize>,
    pub visual_slots: usize,
    pub boundaries: Boundaries,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn is_region(&self, pos: usize) -> bool {
        pos >= 1 && pos <= self.visual_slots
    }

    /// True for ordinary text tokens (not a region slot, not a reserved marker).
    pub fn is_text(&self, pos: usize) -> bool {
        !self.is_region(pos) && !Vocabulary::is_reserved(self.token_ids[pos])
    }

    pub fn text_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&p| self.is_text(p))
    }

    /// Checks the layout invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.segment_ids.len() != n || self.position_ids.len() != n {
            return Err(invalid("token, segment and position lists differ in length"));
        }
        let k = self.visual_slots;
        let b = &self.boundaries;
        let at = |pos: usize, id: TokenId| self.token_ids.get(pos) == Some(&id);
        if b.cls != 0 || !at(0, Vocabulary::CLS) {
            return Err(invalid("sequence must start with [CLS]"));
        }
        if b.image_sep != k + 1 || !at(k + 1, Vocabulary::SEP) {
            return Err(invalid("first [SEP] must follow the region slots"));
        }
        if !(1..=k).all(|p| at(p, Vocabulary::PAD)) {
            return Err(invalid("region slots must hold the placeholder id"));
        }
        if b.end_sep != n - 1 || !at(n - 1, Vocabulary::SEP) {
            return Err(invalid("sequence must end with [SEP]"));
        }
        let mut prev = b.image_sep;
        for &h in &b.his {
            if h <= prev || !at(h, Vocabulary::HIS) {
                return Err(invalid(format!("misplaced [HIS] at {h}")));
            }
            prev = h;
        }
        if b.ques <= prev || !at(b.ques, Vocabulary::QUES) {
            return Err(invalid("misplaced [QUES]"));
        }
        if b.ans <= b.ques + 1 || !at(b.ans, Vocabulary::ANS) || b.end_sep <= b.ans + 1 {
            return Err(invalid("misplaced [ANS] or empty question/answer span"));
        }
        let markers = self
            .token_ids
            .iter()
            .enumerate()
            .filter(|&(p, &t)| Vocabulary::is_reserved(t) && !self.is_region(p))
            .count();
        if markers != 5 + b.his.len() {
            return Err(invalid("unexpected reserved token inside a text span"));
        }
        for (pos, &seg) in self.segment_ids.iter().enumerate() {
            if seg != u8::from(pos > b.image_sep) {
                return Err(invalid(format!("segment id {seg} wrong at {pos}")));
            }
        }
        Ok(())
    }
}

/// Packs a candidate into the model input layout. History turns are dropped
/// oldest-first (then the caption is cut from its end) until the sequence fits
/// `max_len`; the question and candidate are never truncated.
#[allow(clippy::too_many_arguments)]
pub fn pack_sequence(
    num_regions: usize,
    caption: &str,
    history: &[DialogTurn],
    question: &str,
    candidate: &str,
    vocab: &Vocabulary,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<TokenSequence> {
    let question_ids = tokenizer.tokenize(question, vocab);
    let answer_ids = tokenizer.tokenize(candidate, vocab);
    if question_ids.is_empty() {
        return Err(invalid("empty question"));
    }
    if answer_ids.is_empty() {
        return Err(invalid("empty candidate answer"));
    }
    let mut caption_ids = tokenizer.tokenize(caption, vocab);
    let mut turns: Vec<Vec<TokenId>> = history
        .iter()
        .map(|t| {
            let mut ids = tokenizer.tokenize(&t.question, vocab);
            ids.extend(tokenizer.tokenize(&t.answer, vocab));
            ids
        })
        .collect();

    // [CLS] + regions + [SEP] + [QUES] + [ANS] + [SEP]
    let fixed = num_regions + 5 + question_ids.len() + answer_ids.len();
    let history_len = |turns: &[Vec<TokenId>]| turns.iter().map(|t| t.len() + 1).sum::<usize>();
    while !turns.is_empty() && fixed + caption_ids.len() + history_len(&turns) > max_len {
        turns.remove(0);
    }
    if fixed + caption_ids.len() > max_len {
        caption_ids.truncate(max_len.saturating_sub(fixed));
    }
    if fixed > max_len {
        return Err(invalid(format!(
            "question and candidate need {fixed} positions, more than max_len {max_len}"
        )));
    }

    let total = fixed + caption_ids.len() + history_len(&turns);
    let mut token_ids = Vec::with_capacity(total);
    let mut his = Vec::with_capacity(turns.len());
    token_ids.push(Vocabulary::CLS);
    token_ids.extend(std::iter::repeat_n(Vocabulary::PAD, num_regions));
    token_ids.push(Vocabulary::SEP);
    let image_sep = num_regions + 1;
    token_ids.extend(&caption_ids);
    for turn in &turns {
        his.push(token_ids.len());
        token_ids.push(Vocabulary::HIS);
        token_ids.extend(turn);
    }
    let ques = token_ids.len();
    token_ids.push(Vocabulary::QUES);
    token_ids.extend(&question_ids);
    let ans = token_ids.len();
    token_ids.push(Vocabulary::ANS);
    token_ids.extend(&answer_ids);
    let end_sep = token_ids.len();
    token_ids.push(Vocabulary::SEP);

    let segment_ids = (0..token_ids.len()).map(|p| u8::from(p > image_sep)).collect();
    let mut text_pos = 0;
    let position_ids = (0..token_ids.len())
        .map(|p| {
            if p >= 1 && p <= num_regions {
                p - 1
            } else {
                text_pos += 1;
                text_pos - 1
            }
        })
        .collect();

    Ok(TokenSequence {
        token_ids,
        segment_ids,
        position_ids,
        visual_slots: num_regions,
        boundaries: Boundaries {
            cls: 0,
            image_sep,
            his,
            ques,
            ans,
            end_sep,
        },
    })
}
