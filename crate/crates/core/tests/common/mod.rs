//! Shared oracles for the integration tests.
#![allow(dead_code)]

use dialrank::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor for gradients that are both ~0.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
}

/// Compares the tape's gradient with central differences at `coords`
/// (param, flat index) pairs. `build` must rebuild the scalar loss from
/// scratch; `store_of` exposes the parameters inside `state` for nudging.
pub fn fd_check_with<S, G, F>(state: &mut S, store_of: G, coords: &[(ParamId, usize)], build: F) -> FdReport
where
    G: Fn(&mut S) -> &mut ParamStore<f64>,
    F: Fn(&mut Tape<f64>, &S) -> Var,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, state);
    let grads = tape.backward(loss).unwrap();
    let eval = |state: &S| {
        let mut t = Tape::new();
        let l = build(&mut t, state);
        t.item(l)
    };
    let mut max_rel: f64 = 0.0;
    for &(id, i) in coords {
        let analytic = grads.get(id).map_or(0.0, |g| g[i]);
        let orig = store_of(state).get(id).value.data()[i];
        store_of(state).get_mut(id).value.data_mut()[i] = orig + FD_STEP;
        let plus = eval(state);
        store_of(state).get_mut(id).value.data_mut()[i] = orig - FD_STEP;
        let minus = eval(state);
        store_of(state).get_mut(id).value.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_err(analytic, numeric));
    }
    FdReport {
        checked: coords.len(),
        max_rel,
    }
}

pub fn fd_check_coords<F>(store: &mut ParamStore<f64>, coords: &[(ParamId, usize)], build: F) -> FdReport
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    fd_check_with(store, |s| s, coords, build)
}

/// Every coordinate of every parameter.
pub fn all_coords(store: &ParamStore<f64>, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
    ids.iter()
        .flat_map(|&id| (0..store.get(id).value.data().len()).map(move |i| (id, i)))
        .collect()
}

/// Up to `per_param` distinct random coordinates from each parameter.
pub fn random_coords(store: &ParamStore<f64>, ids: &[ParamId], per_param: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &id in ids {
        let len = store.get(id).value.data().len();
        let picks: Vec<usize> = (0..len).collect::<Vec<_>>().choose_multiple(&mut rng, per_param).copied().collect();
        out.extend(picks.into_iter().map(|i| (id, i)));
    }
    out
}

/// Registers `inputs` as parameters, then checks the gradient of a random
/// linear readout of `op`'s output at every input coordinate.
pub fn fd_check_op<F>(inputs: Vec<Tensor<f64>>, seed: u64, op: F) -> FdReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.register(format!("x{i}"), t).unwrap())
        .collect();
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let out = op(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = random_tensor(&mut rng, &probe, -1.0, 1.0);
    let coords = all_coords(&store, &ids);
    fd_check_coords(&mut store, &coords, |tape, store| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let out = op(tape, &vars);
        if tape.shape(out).iter().product::<usize>() == 1 {
            return out;
        }
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod)
    })
}

use dialrank::backbone::{forward_sequence, ModelConfig, TransformerParams};
use dialrank::encoding::{pack_sequence, BasicTokenizer, DialogTurn, TokenSequence, VisualRegion, Vocabulary};
use dialrank::objectives::{
    apply_token_masking, ccl4_head, ccl4_loss, cmtl_loss, objective, MaskedBatch, Phase, QuartetteLabel,
};

/// A small 64-bit model and one masked training sequence for end-to-end
/// gradient checks.
pub struct TinySetup {
    pub params: TransformerParams<f64>,
    pub masked: MaskedBatch,
    pub regions: Vec<VisualRegion<f64>>,
}

pub fn tiny_setup(seed: u64) -> TinySetup {
    let vocab = Vocabulary::new(["a", "dog", "is", "it", "brown", "yes", "no", "?"]);
    let config = ModelConfig {
        num_blocks: 2,
        num_heads: 2,
        hidden_dim: 8,
        ffn_dim: 16,
        vocab_size: vocab.len(),
        max_positions: 32,
        visual_dim: 5,
        regions_per_image: 3,
        contrastive_classes: 4,
        layer_norm_eps: 1e-12,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = TransformerParams::init(config, &mut rng).unwrap();
    // push weights off the tiny init scale so every path carries signal
    for p in params.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let seq: TokenSequence = pack_sequence(
        3,
        "a brown dog",
        &[DialogTurn::new("is it a dog ?", "yes")],
        "is it brown ?",
        "no",
        &vocab,
        &BasicTokenizer,
        32,
    )
    .unwrap();
    let masked = apply_token_masking(&seq, 0.3, &mut rng).unwrap();
    let regions = (0..3)
        .map(|_| {
            let roi = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            VisualRegion::new(roi, [0.1, 0.2, 0.6, 0.7, 0.25, 0.0, 0.9]).unwrap()
        })
        .collect();
    TinySetup { params, masked, regions }
}

/// Joint masked-token plus contrastive loss of the tiny setup.
pub fn tiny_loss(tape: &mut Tape<f64>, params: &TransformerParams<f64>, setup: &TinySetup) -> Var {
    let hidden = forward_sequence(tape, params, &setup.masked.masked_sequence, &setup.regions).unwrap();
    let logits = ccl4_head(tape, params, hidden).unwrap();
    let ccl4 = ccl4_loss(tape, logits, QuartetteLabel::PollutedQuestion).unwrap();
    let cmtl = cmtl_loss(tape, params, hidden, &setup.masked).unwrap();
    objective(tape, cmtl, ccl4, Phase::Both).unwrap()
}

/// Finite-difference check of the full model loss at `per_param` random
/// coordinates of every parameter tensor.
pub fn end_to_end_fd(seed: u64, per_param: usize) -> FdReport {
    let mut setup = tiny_setup(seed);
    let ids: Vec<ParamId> = setup.params.store.ids().collect();
    let coords = random_coords(&setup.params.store, &ids, per_param, seed);
    fd_check_with(&mut setup, |s| &mut s.params.store, &coords, |tape, s| tiny_loss(tape, &s.params, s))
}
