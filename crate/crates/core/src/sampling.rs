//! Training-stream construction: matched and polluted quartettes, VQA records
//! recast as dialog examples with no history, history truncation, and the
//! dialog/VQA mixture.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::data::{DialogRecord, VqaRecord};
use crate::encoding::{pack_sequence, DialogTurn, TokenSequence, Tokenizer, VisualRegion, Vocabulary};
use crate::error::{invalid, Result};
use crate::objectives::QuartetteLabel;
use crate::scalar::Scalar;

/// One (image, history, question, answer) example.
#[derive(Debug, Clone, PartialEq)]
pub struct Quartette<T> {
    pub image_id: u64,
    pub regions: Arc<Vec<VisualRegion<T>>>,
    pub caption: String,
    pub history: Vec<DialogTurn>,
    pub question: String,
    pub answer: String,
}

impl<T: Scalar> Quartette<T> {
    pub fn validate(&self, regions_per_image: usize) -> Result<()> {
        if self.question.trim().is_empty() || self.answer.trim().is_empty() {
            return Err(invalid(format!("image {}: empty question or answer", self.image_id)));
        }
        if self.regions.len() != regions_per_image {
            return Err(invalid(format!(
                "image {}: {} regions, expected {regions_per_image}",
                self.image_id,
                self.regions.len()
            )));
        }
        Ok(())
    }

    pub fn pack(&self, vocab: &Vocabulary, tokenizer: &dyn Tokenizer, max_len: usize) -> Result<TokenSequence> {
        pack_sequence(
            self.regions.len(),
            &self.caption,
            &self.history,
            &self.question,
            &self.answer,
            vocab,
            tokenizer,
            max_len,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PollutionKind {
    None,
    Image,
    Question,
    Answer,
}

impl PollutionKind {
    pub fn label(self) -> QuartetteLabel {
        match self {
            Self::None => QuartetteLabel::Matched,
            Self::Image => QuartetteLabel::PollutedImage,
            Self::Question => QuartetteLabel::PollutedQuestion,
            Self::Answer => QuartetteLabel::PollutedAnswer,
        }
    }

    pub fn from_label(label: QuartetteLabel) -> Self {
        match label {
            QuartetteLabel::Matched => Self::None,
            QuartetteLabel::PollutedImage => Self::Image,
            QuartetteLabel::PollutedQuestion => Self::Question,
            QuartetteLabel::PollutedAnswer => Self::Answer,
        }
    }
}

/// Every training example; donors for pollution are drawn from here.
#[derive(Debug, Clone)]
pub struct QuartettePool<T> {
    examples: Vec<Quartette<T>>,
}

impl<T: Scalar> QuartettePool<T> {
    pub fn new(examples: Vec<Quartette<T>>) -> Result<Self> {
        if examples.len() < 2 {
            return Err(invalid(format!(
                "pool of {} example(s) cannot supply a distinct donor",
                examples.len()
            )));
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, index: usize) -> &Quartette<T> {
        &self.examples[index]
    }

    pub fn examples(&self) -> &[Quartette<T>] {
        &self.examples
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample<T> {
    pub quartette: Quartette<T>,
    pub label: QuartetteLabel,
    pub donor: Option<usize>,
}

const DONOR_ATTEMPTS: usize = 32;

fn same_field<T>(kind: PollutionKind, a: &Quartette<T>, b: &Quartette<T>) -> bool {
    match kind {
        PollutionKind::None => true,
        PollutionKind::Image => a.image_id == b.image_id,
        PollutionKind::Question => a.question == b.question,
        PollutionKind::Answer => a.answer == b.answer,
    }
}

fn pick_donor<T, R: Rng + ?Sized>(pool: &QuartettePool<T>, index: usize, kind: PollutionKind, rng: &mut R) -> usize
where
    T: Scalar,
{
    let n = pool.len();
    let draw = |rng: &mut R| {
        let d = rng.random_range(0..n - 1);
        if d >= index {
            d + 1
        } else {
            d
        }
    };
    let original = pool.get(index);
    let mut donor = draw(rng);
    for _ in 0..DONOR_ATTEMPTS {
        if !same_field(kind, original, pool.get(donor)) {
            return donor;
        }
        donor = draw(rng);
    }
    // Rejection sampling failed: fall back to a uniform pick among all
    // differing donors, if the pool has any.
    let differing: Vec<usize> = (0..n)
        .filter(|&d| d != index && !same_field(kind, original, pool.get(d)))
        .collect();
    if differing.is_empty() {
        donor
    } else {
        differing[rng.random_range(0..differing.len())]
    }
}

/// Emits the example unchanged with probability 1/2; otherwise swaps its
/// image, question or answer (uniformly) for that of a different example.
pub fn build_training_quartette<T, R>(pool: &QuartettePool<T>, index: usize, rng: &mut R) -> Result<TrainingSample<T>>
where
    T: Scalar,
    R: Rng + ?Sized,
{
    if pool.len() < 2 {
        return Err(invalid("pool too small for pollution"));
    }
    if index >= pool.len() {
        return Err(invalid(format!("example {index} outside pool of {}", pool.len())));
    }
    let original = pool.get(index);
    let kind = if rng.random_bool(0.5) {
        PollutionKind::None
    } else {
        [PollutionKind::Image, PollutionKind::Question, PollutionKind::Answer][rng.random_range(0..3)]
    };
    if kind == PollutionKind::None {
        return Ok(TrainingSample {
            quartette: original.clone(),
            label: QuartetteLabel::Matched,
            donor: None,
        });
    }
    let donor_idx = pick_donor(pool, index, kind, rng);
    let donor = pool.get(donor_idx);
    let mut q = original.clone();
    match kind {
        PollutionKind::Image => {
            q.image_id = donor.image_id;
            q.regions = Arc::clone(&donor.regions);
        }
        PollutionKind::Question => q.question = donor.question.clone(),
        PollutionKind::Answer => q.answer = donor.answer.clone(),
        PollutionKind::None => unreachable!(),
    }
    Ok(TrainingSample {
        quartette: q,
        label: kind.label(),
        donor: Some(donor_idx),
    })
}

/// Keeps the most recent `max_turns` turns.
pub fn truncate_history(history: &[DialogTurn], max_turns: usize) -> Vec<DialogTurn> {
    history[history.len().saturating_sub(max_turns)..].to_vec()
}

/// Recasts a VQA record as a quartette with empty history and the caption the
/// dialog data gives for the same image. `None` when the caption or the
/// image's regions are unavailable.
pub fn vqa_to_quartette<T: Scalar>(
    record: &VqaRecord,
    captions: &HashMap<u64, String>,
    regions: &HashMap<u64, Arc<Vec<VisualRegion<T>>>>,
) -> Option<Quartette<T>> {
    let caption = captions.get(&record.image_id)?;
    let regions = regions.get(&record.image_id)?;
    Some(Quartette {
        image_id: record.image_id,
        regions: Arc::clone(regions),
        caption: caption.clone(),
        history: Vec::new(),
        question: record.question.clone(),
        answer: record.answer.clone(),
    })
}

/// One quartette per round of a dialog, each carrying the caption and the
/// most recent `history_turns` earlier rounds as history.
pub fn dialog_quartettes<T: Scalar>(
    record: &DialogRecord,
    regions: &HashMap<u64, Arc<Vec<VisualRegion<T>>>>,
    history_turns: usize,
) -> Result<Vec<Quartette<T>>> {
    let regions = regions
        .get(&record.image_id)
        .ok_or_else(|| invalid(format!("no region features for dialog image {}", record.image_id)))?;
    let turns: Vec<DialogTurn> = record
        .rounds
        .iter()
        .map(|r| DialogTurn::new(r.question.clone(), r.answer.clone()))
        .collect();
    Ok(record
        .rounds
        .iter()
        .enumerate()
        .map(|(i, round)| Quartette {
            image_id: record.image_id,
            regions: Arc::clone(regions),
            caption: record.caption.clone(),
            history: truncate_history(&turns[..i], history_turns),
            question: round.question.clone(),
            answer: round.answer.clone(),
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct VqaConversion<T> {
    pub quartettes: Vec<Quartette<T>>,
    pub skipped: usize,
}

pub fn convert_vqa<T: Scalar>(
    records: &[VqaRecord],
    captions: &HashMap<u64, String>,
    regions: &HashMap<u64, Arc<Vec<VisualRegion<T>>>>,
) -> VqaConversion<T> {
    let mut quartettes = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in records {
        match vqa_to_quartette(r, captions, regions) {
            Some(q) => quartettes.push(q),
            None => skipped += 1,
        }
    }
    VqaConversion { quartettes, skipped }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Dialog(usize),
    Vqa(usize),
}

/// Endless interleaving of two index streams: each emission comes from the
/// VQA stream with probability `vqa_fraction`. Each stream cycles through its
/// items in the given order.
#[derive(Debug)]
pub struct MixedStream<'r, R: ?Sized> {
    dialog: Vec<usize>,
    vqa: Vec<usize>,
    next_dialog: usize,
    next_vqa: usize,
    fraction: f64,
    rng: &'r mut R,
}

pub fn mix_datasets<R: Rng + ?Sized>(
    dialog: Vec<usize>,
    vqa: Vec<usize>,
    vqa_fraction: f64,
    rng: &mut R,
) -> Result<MixedStream<'_, R>> {
    if !(0.0..=1.0).contains(&vqa_fraction) {
        return Err(invalid(format!("vqa fraction {vqa_fraction} outside [0,1]")));
    }
    if vqa_fraction > 0.0 && vqa.is_empty() {
        return Err(invalid("positive vqa fraction with an empty VQA stream"));
    }
    if vqa_fraction < 1.0 && dialog.is_empty() {
        return Err(invalid("empty dialog stream"));
    }
    Ok(MixedStream {
        dialog,
        vqa,
        next_dialog: 0,
        next_vqa: 0,
        fraction: vqa_fraction,
        rng,
    })
}

impl<R: Rng + ?Sized> Iterator for MixedStream<'_, R> {
    type Item = Source;

    fn next(&mut self) -> Option<Source> {
        let from_vqa = self.fraction >= 1.0 || (self.fraction > 0.0 && self.rng.random_bool(self.fraction));
        if from_vqa {
            let i = self.vqa[self.next_vqa % self.vqa.len()];
            self.next_vqa += 1;
            Some(Source::Vqa(i))
        } else {
            let i = self.dialog[self.next_dialog % self.dialog.len()];
            self.next_dialog += 1;
            Some(Source::Dialog(i))
        }
    }
}
