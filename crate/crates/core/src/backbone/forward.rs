use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::encoding::{TokenSequence, VisualRegion, LOCATION_DIM};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::mask::AttentionMask;
use super::params::{LinearIds, NormIds, TransformerBlock, TransformerParams};

fn linear<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, ids: LinearIds, x: Var) -> Result<Var> {
    let w = tape.param(store, ids.weight);
    let b = tape.param(store, ids.bias);
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, ids: NormIds, x: Var, eps: T) -> Result<Var> {
    let g = tape.param(store, ids.gain);
    let b = tape.param(store, ids.bias);
    tape.layer_norm(x, g, b, eps)
}

/// Builds `H^0`: token + position + segment embeddings for text positions,
/// projected RoI feature + projected location vector + position + segment
/// for region slots, then layer normalization over every row.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    params: &TransformerParams<T>,
    seq: &TokenSequence,
    regions: &[VisualRegion<T>],
) -> Result<Var> {
    let store = &params.store;
    let ids = &params.embeddings;
    let k = seq.visual_slots;
    if regions.len() != k {
        return Err(Error::Shape {
            op: "embed regions",
            left: vec![k],
            right: vec![regions.len()],
        });
    }
    let tok = tape.param(store, ids.token);
    let to_usize = |v: &[u32]| v.iter().map(|&t| t as usize).collect::<Vec<_>>();
    let cls = tape.gather_rows(tok, &to_usize(&seq.token_ids[..1]))?;
    let rest = tape.gather_rows(tok, &to_usize(&seq.token_ids[k + 1..]))?;
    let rows = if k == 0 {
        tape.concat_rows(&[cls, rest])?
    } else {
        let dv = regions[0].roi_feature.len();
        let mut roi = Vec::with_capacity(k * dv);
        let mut loc = Vec::with_capacity(k * LOCATION_DIM);
        for r in regions {
            if r.roi_feature.len() != dv {
                return Err(Error::Shape {
                    op: "embed roi",
                    left: vec![dv],
                    right: vec![r.roi_feature.len()],
                });
            }
            roi.extend_from_slice(&r.roi_feature);
            loc.extend_from_slice(&r.location);
        }
        let roi = tape.constant(Tensor::new(vec![k, dv], roi)?);
        let loc = tape.constant(Tensor::new(vec![k, LOCATION_DIM], loc)?);
        let roi = linear(tape, store, ids.roi, roi)?;
        let loc = linear(tape, store, ids.location, loc)?;
        let visual = tape.add(roi, loc)?;
        tape.concat_rows(&[cls, visual, rest])?
    };
    let pos_table = tape.param(store, ids.position);
    let pos = tape.gather_rows(pos_table, &seq.position_ids)?;
    let seg_table = tape.param(store, ids.segment);
    let seg_ids: Vec<usize> = seq.segment_ids.iter().map(|&s| usize::from(s)).collect();
    let seg = tape.gather_rows(seg_table, &seg_ids)?;
    let x = tape.add(rows, pos)?;
    let x = tape.add(x, seg)?;
    norm(tape, store, ids.norm, x, T::lit(params.config.layer_norm_eps))
}

/// Multi-head masked self-attention followed by the output projection.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &TransformerBlock,
    h: Var,
    mask: &AttentionMask,
) -> Result<Var> {
    let n = tape.shape(h)[0];
    if mask.size() != n {
        return Err(Error::Shape {
            op: "attention mask",
            left: vec![n, n],
            right: vec![mask.size(), mask.size()],
        });
    }
    let additive = mask.additive::<T>();
    let mut heads = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let wq = tape.param(store, head.query);
        let wk = tape.param(store, head.key);
        let wv = tape.param(store, head.value);
        let dk = tape.shape(wq)[1];
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::one() / T::from_usize(dk).expect("dk").sqrt());
        let weights = tape.masked_softmax(scores, &additive)?;
        heads.push(tape.matmul(weights, v)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    linear(tape, store, block.output, joined)
}

/// Post-norm encoder block: `h' = LN(h + Attn(h))`, `out = LN(h' + FFN(h'))`
/// with `FFN = Linear → GELU → Linear`.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &TransformerBlock,
    h: Var,
    mask: &AttentionMask,
    eps: T,
) -> Result<Var> {
    let a = attention(tape, store, block, h, mask)?;
    let h1 = tape.add(h, a)?;
    let h1 = norm(tape, store, block.attention_norm, h1, eps)?;
    let f = linear(tape, store, block.ffn_in, h1)?;
    let f = tape.gelu(f);
    let f = linear(tape, store, block.ffn_out, f)?;
    let h2 = tape.add(h1, f)?;
    norm(tape, store, block.ffn_norm, h2, eps)
}

/// Runs every block in order and returns the final hidden states.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    params: &TransformerParams<T>,
    h0: Var,
    mask: &AttentionMask,
) -> Result<Var> {
    let eps = T::lit(params.config.layer_norm_eps);
    params
        .blocks
        .iter()
        .try_fold(h0, |h, block| transformer_block(tape, &params.store, block, h, mask, eps))
}

/// Embeds and encodes a packed sequence under full bidirectional attention.
pub fn forward_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    params: &TransformerParams<T>,
    seq: &TokenSequence,
    regions: &[VisualRegion<T>],
) -> Result<Var> {
    let h0 = embed(tape, params, seq, regions)?;
    let mask = super::mask::build_attention_mask(seq, 0);
    encode(tape, params, h0, &mask)
}
