//! Candidate scoring, deterministic ranking and the retrieval metrics
//! (NDCG, MRR, R@k, mean rank).

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::backbone::{forward_sequence, TransformerParams};
use crate::data::DialogRecord;
use crate::encoding::{Tokenizer, VisualRegion, Vocabulary};
use crate::error::{invalid, Result};
use crate::objectives::ccl4_head;
use crate::sampling::{dialog_quartettes, Quartette};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<String>,
    pub gt_index: usize,
    pub dense_relevance: Option<Vec<f64>>,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.candidates.len();
        if n == 0 {
            return Err(invalid("empty candidate list"));
        }
        if self.gt_index >= n {
            return Err(invalid(format!("gt_index {} outside {n} candidates", self.gt_index)));
        }
        if let Some(rel) = &self.dense_relevance {
            if rel.len() != n {
                return Err(invalid(format!("{} relevance values for {n} candidates", rel.len())));
            }
        }
        Ok(())
    }

    /// Dense relevance when annotated, else the ground-truth indicator.
    pub fn relevance(&self) -> Vec<f64> {
        match &self.dense_relevance {
            Some(r) => r.clone(),
            None => (0..self.candidates.len())
                .map(|i| if i == self.gt_index { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub scores: Vec<f64>,
    /// Candidate indices, best first.
    pub order: Vec<usize>,
}

impl RankingResult {
    /// 1-based position of `candidate` in the ranking.
    pub fn rank_of(&self, candidate: usize) -> Result<usize> {
        self.order
            .iter()
            .position(|&c| c == candidate)
            .map(|p| p + 1)
            .ok_or_else(|| invalid(format!("candidate {candidate} not in ranking of {}", self.order.len())))
    }
}

/// Sorts by descending score; equal scores keep ascending index order.
pub fn rank(scores: &[f64]) -> Result<RankingResult> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(invalid(format!("non-finite score {} at candidate {i}", scores[i])));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(RankingResult {
        scores: scores.to_vec(),
        order,
    })
}

pub fn mrr_of(result: &RankingResult, gt_index: usize) -> Result<f64> {
    Ok(1.0 / result.rank_of(gt_index)? as f64)
}

pub fn r_at_k(result: &RankingResult, gt_index: usize, k: usize) -> Result<u8> {
    Ok(u8::from(result.rank_of(gt_index)? <= k))
}

pub fn mean_rank_of(result: &RankingResult, gt_index: usize) -> Result<usize> {
    result.rank_of(gt_index)
}

/// NDCG truncated at K, the number of candidates with positive relevance.
/// `Ok(None)` when no candidate is relevant and the metric is undefined.
pub fn ndcg_of(result: &RankingResult, relevance: &[f64]) -> Result<Option<f64>> {
    if relevance.len() != result.order.len() {
        return Err(invalid(format!(
            "{} relevance values for {} ranked candidates",
            relevance.len(),
            result.order.len()
        )));
    }
    if relevance.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(invalid("relevance outside [0,1]"));
    }
    let k = relevance.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return Ok(None);
    }
    let discount = |i: usize| ((i + 2) as f64).log2();
    let dcg: f64 = result.order[..k]
        .iter()
        .enumerate()
        .map(|(i, &c)| relevance[c] / discount(i))
        .sum();
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal[..k].iter().enumerate().map(|(i, r)| r / discount(i)).sum();
    Ok(Some(dcg / idcg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub ndcg: f64,
    pub mrr: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean_rank: f64,
    pub num_examples: usize,
    /// Examples whose relevance was all zero, left out of the NDCG average.
    pub ndcg_undefined: usize,
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "NDCG {:.4}  MRR {:.4}  R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  Mean {:.3}  (n={}, ndcg-undefined={})",
            self.ndcg,
            self.mrr,
            self.r_at_1,
            self.r_at_5,
            self.r_at_10,
            self.mean_rank,
            self.num_examples,
            self.ndcg_undefined
        )
    }
}

/// Averages per-example metrics over `(ranking, candidates)` pairs.
pub fn aggregate<'a, I>(items: I) -> Result<MetricReport>
where
    I: IntoIterator<Item = (&'a RankingResult, &'a CandidateSet)>,
{
    let (mut n, mut undefined, mut ndcg_n) = (0usize, 0usize, 0usize);
    let (mut ndcg, mut mrr, mut r1, mut r5, mut r10, mut mean) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (result, set) in items {
        let rank = result.rank_of(set.gt_index)?;
        n += 1;
        mrr += 1.0 / rank as f64;
        r1 += f64::from(u8::from(rank <= 1));
        r5 += f64::from(u8::from(rank <= 5));
        r10 += f64::from(u8::from(rank <= 10));
        mean += rank as f64;
        match ndcg_of(result, &set.relevance())? {
            Some(v) => {
                ndcg += v;
                ndcg_n += 1;
            }
            None => undefined += 1,
        }
    }
    if n == 0 {
        return Err(invalid("cannot evaluate an empty split"));
    }
    let nf = n as f64;
    Ok(MetricReport {
        ndcg: if ndcg_n == 0 { 0.0 } else { ndcg / ndcg_n as f64 },
        mrr: mrr / nf,
        r_at_1: r1 / nf,
        r_at_5: r5 / nf,
        r_at_10: r10 / nf,
        mean_rank: mean / nf,
        num_examples: n,
        ndcg_undefined: undefined,
    })
}

/// A question in context with the candidate answers to rank.
#[derive(Debug, Clone)]
pub struct EvalExample<T> {
    pub image_id: u64,
    /// 0-based round within the dialog.
    pub round: usize,
    /// Image, caption, history and question; the answer slot is overwritten
    /// by each candidate in turn.
    pub context: Quartette<T>,
    pub candidates: CandidateSet,
}

pub fn eval_examples<T: Scalar>(
    dialogs: &[DialogRecord],
    regions: &HashMap<u64, Arc<Vec<VisualRegion<T>>>>,
    history_turns: usize,
) -> Result<Vec<EvalExample<T>>> {
    let mut out = Vec::new();
    for record in dialogs {
        let contexts = dialog_quartettes(record, regions, history_turns)?;
        for (round, (context, r)) in contexts.into_iter().zip(&record.rounds).enumerate() {
            let candidates = CandidateSet {
                candidates: r.candidates.clone(),
                gt_index: r.gt_index,
                dense_relevance: r.relevance.clone(),
            };
            candidates.validate()?;
            out.push(EvalExample {
                image_id: record.image_id,
                round,
                context,
                candidates,
            });
        }
    }
    Ok(out)
}

pub trait CandidateScorer<T>: Sync {
    /// One score per candidate; higher means more likely the true answer.
    fn score(&self, example: &EvalExample<T>) -> Result<Vec<f64>>;
}

/// Scores each candidate by the classifier's probability that the quartette
/// is matched (class 0).
pub struct ModelScorer<'a, T> {
    pub params: &'a TransformerParams<T>,
    pub vocab: &'a Vocabulary,
    pub tokenizer: &'a dyn Tokenizer,
    pub max_len: usize,
}

impl<T: Scalar> ModelScorer<'_, T> {
    pub fn matched_probability(&self, quartette: &Quartette<T>) -> Result<f64> {
        let seq = quartette.pack(self.vocab, self.tokenizer, self.max_len)?;
        let mut tape = Tape::new();
        let hidden = forward_sequence(&mut tape, self.params, &seq, &quartette.regions)?;
        let logits = ccl4_head(&mut tape, self.params, hidden)?;
        let z: Vec<f64> = tape.value(logits).iter().map(|v| v.as_f64()).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
        Ok((z[0] - max).exp() / denom)
    }
}

impl<T: Scalar> CandidateScorer<T> for ModelScorer<'_, T> {
    fn score(&self, example: &EvalExample<T>) -> Result<Vec<f64>> {
        score_candidates(self, &example.context, &example.candidates)
    }
}

pub fn score_candidates<T: Scalar>(
    scorer: &ModelScorer<'_, T>,
    context: &Quartette<T>,
    candidates: &CandidateSet,
) -> Result<Vec<f64>> {
    let mut q = context.clone();
    candidates
        .candidates
        .iter()
        .map(|c| {
            q.answer.clone_from(c);
            scorer.matched_probability(&q)
        })
        .collect()
}

/// Per-(dialog, round) scores for the prediction dump.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub round: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Vec<Prediction>,
    pub rankings: Vec<RankingResult>,
}

/// Scores every example (in parallel; the scorer only reads the model) and
/// aggregates in input order.
pub fn evaluate_split<T: Scalar, S: CandidateScorer<T> + ?Sized>(
    scorer: &S,
    examples: &[EvalExample<T>],
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(invalid("cannot evaluate an empty split"));
    }
    let rankings = examples
        .par_iter()
        .map(|ex| {
            let scores = scorer.score(ex)?;
            if scores.len() != ex.candidates.candidates.len() {
                return Err(invalid(format!(
                    "scorer returned {} scores for {} candidates",
                    scores.len(),
                    ex.candidates.candidates.len()
                )));
            }
            rank(&scores)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(rankings.iter().zip(examples.iter().map(|e| &e.candidates)))?;
    let predictions = examples
        .iter()
        .zip(&rankings)
        .map(|(ex, r)| Prediction {
            image_id: ex.image_id,
            round: ex.round,
            scores: r.scores.clone(),
        })
        .collect();
    Ok(Evaluation {
        report,
        predictions,
        rankings,
    })
}

/// Tab-separated: image_id, round, then every score with six decimals.
pub fn write_predictions<W: Write>(predictions: &[Prediction], mut out: W) -> Result<()> {
    for p in predictions {
        write!(out, "{}\t{}", p.image_id, p.round)?;
        for s in &p.scores {
            write!(out, "\t{s:.6}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
