//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single PASS/FAIL line (written straight to stderr so it survives output
//! capture) before asserting.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::*;
use dialrank::autodiff::{Tensor, Var};
use dialrank::data::{
    generate_synthetic, load_dialogs, load_vqa, save_records, write_synthetic, Checkpoint, FeatureStore,
    ImageFeatures, SyntheticData, SyntheticSpec,
};
use dialrank::encoding::{BasicTokenizer, Vocabulary};
use dialrank::evaluation::{aggregate, eval_examples, ndcg_of, rank, CandidateSet, MetricReport};
use dialrank::objectives::{apply_token_masking, DEFAULT_MASK_RATE};
use dialrank::sampling::{build_training_quartette, QuartettePool};
use dialrank::train::{RunConfig, TrainData, Trainer};
use dialrank::ModelConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Criteria run one at a time so the timed ones are not slowed by training.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] criterion {criterion} ({name}): {verdict} - {detail}");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let ninf = f64::NEG_INFINITY;
    let mask = Tensor::new(vec![3, 4], vec![0.0, ninf, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, ninf, 0.0, ninf, 0.0]).unwrap();
    type Op = Box<dyn Fn(&mut dialrank::Tape64, &[Var]) -> Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Op)> = vec![
        ("matmul", vec![vec![4, 5], vec![5, 3]], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("transpose", vec![vec![3, 4]], Box::new(|t, v| t.transpose(v[0]).unwrap())),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("add_row", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.add_row(v[0], v[1]).unwrap())),
        ("scale", vec![vec![3, 4]], Box::new(|t, v| t.scale(v[0], 1.7))),
        ("sum", vec![vec![3, 4]], Box::new(|t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.sum(sq)
        })),
        ("masked_softmax", vec![vec![3, 4]], Box::new(move |t, v| t.masked_softmax(v[0], &mask).unwrap())),
        ("layer_norm", vec![vec![3, 8], vec![8], vec![8]], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-12).unwrap())),
        ("gelu", vec![vec![3, 5]], Box::new(|t, v| t.gelu(v[0]))),
        ("gather_rows", vec![vec![4, 3]], Box::new(|t, v| t.gather_rows(v[0], &[3, 1, 3]).unwrap())),
        ("slice_cols", vec![vec![3, 5]], Box::new(|t, v| t.slice_cols(v[0], 1, 3).unwrap())),
        ("concat_cols", vec![vec![2, 2], vec![2, 3]], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap())),
        ("concat_rows", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]).unwrap())),
        ("cross_entropy", vec![vec![4, 5]], Box::new(|t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap())),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    let mut all_ok = true;
    for (i, (name, shapes, op)) in cases.iter().enumerate() {
        let inputs: Vec<_> = shapes.iter().map(|s| random_tensor(&mut rng, s, -1.5, 1.5)).collect();
        let rep = fd_check_op(inputs, i as u64, |t, v| op(t, v));
        all_ok &= rep.checked >= 10 && rep.max_rel < 1e-4;
        if rep.max_rel > worst.0 {
            worst = (rep.max_rel, name);
        }
    }
    let mut e2e_worst: f64 = 0.0;
    let mut e2e_checked = 0;
    for seed in 0..2 {
        let rep = end_to_end_fd(seed, 2);
        e2e_checked += rep.checked;
        e2e_worst = e2e_worst.max(rep.max_rel);
    }
    all_ok &= e2e_checked >= 10 && e2e_worst < 1e-4;
    let elapsed = start.elapsed();
    let pass = all_ok && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} ops, worst op rel err {:.2e} ({}); end-to-end {} coords, worst {:.2e}; {:.1}s",
            cases.len(),
            worst.0,
            worst.1,
            e2e_checked,
            e2e_worst,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

/// 1-based rank by counting: candidates with a higher score, or an equal
/// score and a smaller index, come first.
fn oracle_rank(scores: &[f64], c: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[c] || (scores[j] == scores[c] && j < c))
        .count()
}

fn oracle_ndcg(scores: &[f64], rel: &[f64]) -> Option<f64> {
    let k = rel.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return None;
    }
    let mut dcg = 0.0;
    for (c, &r_c) in rel.iter().enumerate() {
        let r = oracle_rank(scores, c);
        if r <= k {
            dcg += r_c / ((r + 1) as f64).log2();
        }
    }
    let mut ideal = rel.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = (0..k).map(|i| ideal[i] / ((i + 2) as f64).log2()).sum();
    Some(dcg / idcg)
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, CandidateSet) {
    // coarse scores force ties; some relevance vectors are all zero
    let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 8.0).collect();
    let levels = [0.0, 0.0, 0.0, 0.25, 0.5, 1.0];
    let rel: Vec<f64> = if rng.random_bool(0.05) {
        vec![0.0; n]
    } else {
        (0..n).map(|_| levels[rng.random_range(0..levels.len())]).collect()
    };
    let set = CandidateSet {
        candidates: (0..n).map(|i| format!("c{i}")).collect(),
        gt_index: rng.random_range(0..n),
        dense_relevance: Some(rel),
    };
    (scores, set)
}

#[test]
fn criterion_2_metric_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let n = 20;
    let mut max_err: f64 = 0.0;
    let mut ok = true;
    let mut rankings = Vec::new();
    let mut sets = Vec::new();
    let (mut sum_mrr, mut sum_mean, mut sum_r1, mut sum_r5, mut sum_r10, mut sum_ndcg, mut n_ndcg) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    for _ in 0..1000 {
        let (scores, set) = random_instance(&mut rng, n);
        let r = rank(&scores).unwrap();
        for c in 0..n {
            ok &= r.rank_of(c).unwrap() == oracle_rank(&scores, c);
        }
        let gt_rank = oracle_rank(&scores, set.gt_index);
        let rel = set.dense_relevance.clone().unwrap();
        match (ndcg_of(&r, &rel).unwrap(), oracle_ndcg(&scores, &rel)) {
            (Some(a), Some(b)) => {
                max_err = max_err.max((a - b).abs());
                sum_ndcg += b;
                n_ndcg += 1;
            }
            (None, None) => {}
            _ => ok = false,
        }
        sum_mrr += 1.0 / gt_rank as f64;
        sum_mean += gt_rank as f64;
        sum_r1 += f64::from(u8::from(gt_rank <= 1));
        sum_r5 += f64::from(u8::from(gt_rank <= 5));
        sum_r10 += f64::from(u8::from(gt_rank <= 10));
        rankings.push(r);
        sets.push(set);
    }
    let rep: MetricReport = aggregate(rankings.iter().zip(&sets)).unwrap();
    for (got, want) in [
        (rep.mrr, sum_mrr / 1000.0),
        (rep.mean_rank, sum_mean / 1000.0),
        (rep.r_at_1, sum_r1 / 1000.0),
        (rep.r_at_5, sum_r5 / 1000.0),
        (rep.r_at_10, sum_r10 / 1000.0),
        (rep.ndcg, sum_ndcg / n_ndcg as f64),
    ] {
        max_err = max_err.max((got - want).abs());
    }
    ok &= rep.num_examples == 1000 && rep.ndcg_undefined == 1000 - n_ndcg;

    // Exhaustive tie permutations: shuffling scores among equally relevant
    // candidates never changes NDCG.
    let mut tie_cases = 0;
    for _ in 0..50 {
        let rel: Vec<f64> = (0..6).map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)]).collect();
        if rel.iter().all(|&r| r == 0.0) {
            continue;
        }
        let scores: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let base = ndcg_of(&rank(&scores).unwrap(), &rel).unwrap().unwrap();
        for level in [0.0, 0.5, 1.0] {
            let group: Vec<usize> = (0..6).filter(|&i| rel[i] == level).collect();
            for perm in permutations(&group) {
                let mut s = scores.clone();
                for (&dst, &src) in group.iter().zip(&perm) {
                    s[dst] = scores[src];
                }
                let v = ndcg_of(&rank(&s).unwrap(), &rel).unwrap().unwrap();
                max_err = max_err.max((v - base).abs());
                tie_cases += 1;
            }
        }
    }
    // Permuting candidates ranked entirely below the top-K window.
    for _ in 0..200 {
        let (scores, set) = random_instance(&mut rng, n);
        let rel = set.dense_relevance.unwrap();
        let r = rank(&scores).unwrap();
        let Some(base) = ndcg_of(&r, &rel).unwrap() else { continue };
        let k = rel.iter().filter(|&&x| x > 0.0).count();
        let tail: Vec<usize> = r.order[k..].to_vec();
        let mut shuffled = tail.clone();
        shuffled.shuffle(&mut rng);
        let mut order = r.order.clone();
        order[k..].copy_from_slice(&shuffled);
        let permuted = dialrank::evaluation::RankingResult { scores: scores.clone(), order };
        max_err = max_err.max((ndcg_of(&permuted, &rel).unwrap().unwrap() - base).abs());
    }
    let elapsed = start.elapsed();
    let pass = ok && max_err < 1e-9 && tie_cases > 0 && elapsed < Duration::from_secs(10);
    report(
        2,
        "metric oracles",
        pass,
        &format!(
            "1000 instances, {tie_cases} tie permutations, max |diff| {max_err:.1e}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

// ---------------------------------------------------------------- 3

fn synthetic(seed: u64) -> SyntheticData {
    generate_synthetic(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn criterion_3_mixture() {
    let _g = serial();
    let data = synthetic(0);
    let regions = data.features.region_map::<f64>().unwrap();
    let train = TrainData::from_records(data.vocab, &data.train, &data.vqa, &regions, 1).unwrap();
    let pool = QuartettePool::new(train.dialog).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut counts = [0u64; 4];
    let draws = 100_000;
    for _ in 0..draws {
        let i = rng.random_range(0..pool.len());
        counts[build_training_quartette(&pool, i, &mut rng).unwrap().label.class()] += 1;
    }
    let expected = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0].map(|p| p * draws as f64);
    let chi2: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&o, e)| (o as f64 - e).powi(2) / e)
        .sum();
    let critical = ChiSquared::new(3.0).unwrap().inverse_cdf(0.99);
    let pass = chi2 < critical;
    report(
        3,
        "pollution mixture",
        pass,
        &format!("counts {counts:?}, chi2 {chi2:.3} vs critical {critical:.3} (df 3, alpha 0.01)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_masking_rate() {
    let _g = serial();
    let data = synthetic(0);
    let regions = data.features.region_map::<f64>().unwrap();
    let train = TrainData::from_records(data.vocab.clone(), &data.train, &data.vqa, &regions, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let (mut eligible, mut masked) = (0usize, 0usize);
    for q in train.dialog.iter().cycle() {
        if eligible >= 10_000 {
            break;
        }
        let seq = q.pack(&data.vocab, &BasicTokenizer, 64).unwrap();
        let m = apply_token_masking(&seq, DEFAULT_MASK_RATE, &mut rng).unwrap();
        eligible += seq.text_positions().count();
        masked += m.masked_positions.len();
    }
    let rate = masked as f64 / eligible as f64;
    let pass = (0.14..=0.16).contains(&rate);
    report(4, "masking rate", pass, &format!("{masked}/{eligible} = {rate:.4}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 5 & 6

/// Desk configuration used for the learnability and ablation runs.
fn desk_config(seed: u64, classes: usize, with_vqa: bool, vocab_size: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            vocab_size,
            contrastive_classes: classes,
            ..ModelConfig::default()
        },
        seed,
        base_lr: DESK_LR,
        phase1_epochs: DESK_PHASE1,
        phase2_epochs: DESK_PHASE2,
        vqa_fraction: if with_vqa { 0.5 } else { 0.0 },
        ..RunConfig::default()
    }
}

const DESK_LR: f64 = 1e-3;
const DESK_PHASE1: usize = 10;
const DESK_PHASE2: usize = 15;

fn heldout_mrr_run(seed: u64, classes: usize, with_vqa: bool) -> (MetricReport, Duration) {
    let start = Instant::now();
    let data = synthetic(0);
    let regions = data.features.region_map::<f64>().unwrap();
    let vqa = if with_vqa { data.vqa.clone() } else { Vec::new() };
    let cfg = desk_config(seed, classes, with_vqa, data.vocab.len());
    let train = TrainData::from_records(data.vocab.clone(), &data.train, &vqa, &regions, cfg.history_turns).unwrap();
    let heldout = eval_examples(&data.heldout, &regions, cfg.history_turns).unwrap();
    let mut trainer = Trainer::<f64>::new(cfg, train).unwrap();
    trainer.train(None, None, |_| {}).unwrap();
    (trainer.evaluate(&heldout).unwrap(), start.elapsed())
}

type RunKey = (u64, usize, bool);

fn run_cache() -> &'static Mutex<HashMap<RunKey, (MetricReport, Duration)>> {
    static CACHE: OnceLock<Mutex<HashMap<RunKey, (MetricReport, Duration)>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn cached_run(seed: u64, classes: usize, with_vqa: bool) -> (MetricReport, Duration) {
    let key = (seed, classes, with_vqa);
    if let Some(r) = run_cache().lock().unwrap().get(&key) {
        return *r;
    }
    let r = heldout_mrr_run(seed, classes, with_vqa);
    run_cache().lock().unwrap().insert(key, r);
    r
}

/// Expected MRR of a uniformly random ranking: H_n / n.
fn random_mrr(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum::<f64>() / n as f64
}

#[test]
fn criterion_5_learnability() {
    let _g = serial();
    let n_c = 20;
    let (m, elapsed) = cached_run(0, 4, true);
    let rank_bar = 0.6 * (n_c as f64 + 1.0) / 2.0;
    let mrr_bar = 2.0 * random_mrr(n_c);
    let pass = m.mean_rank <= rank_bar && m.mrr >= mrr_bar && elapsed < Duration::from_secs(15 * 60);
    report(
        5,
        "learnability",
        pass,
        &format!(
            "held-out mean rank {:.3} (bar {rank_bar:.2}), MRR {:.4} (bar {mrr_bar:.4}), R@1 {:.3}, NDCG {:.3}; {:.0}s",
            m.mean_rank,
            m.mrr,
            m.r_at_1,
            m.ndcg,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_ablation_direction() {
    let _g = serial();
    let seeds = [0, 1, 2];
    let mean = |classes: usize, vqa: bool| {
        let mrrs: Vec<f64> = seeds.iter().map(|&s| cached_run(s, classes, vqa).0.mrr).collect();
        (mrrs.iter().sum::<f64>() / mrrs.len() as f64, mrrs)
    };
    let (full, full_each) = mean(4, true);
    let (two_way, two_each) = mean(2, true);
    let (no_vqa, novqa_each) = mean(4, false);
    let pass = two_way <= full && no_vqa <= full;
    report(
        6,
        "ablation direction",
        pass,
        &format!(
            "mean held-out MRR over seeds {seeds:?}: full {full:.4} {full_each:.3?}, 2-way head {two_way:.4} {two_each:.3?}, without VQA {no_vqa:.4} {novqa_each:.3?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

fn small_run_config(vocab_size: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            vocab_size,
            num_blocks: 1,
            hidden_dim: 32,
            ffn_dim: 64,
            ..ModelConfig::default()
        },
        seed: 7,
        batch_size: 8,
        base_lr: 1e-3,
        phase1_epochs: 2,
        phase2_epochs: 1,
        ..RunConfig::default()
    }
}

fn small_train_data() -> TrainData<f64> {
    let data = generate_synthetic(&SyntheticSpec {
        num_images: 12,
        rounds_per_image: 4,
        vqa_per_image: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let regions = data.features.region_map::<f64>().unwrap();
    TrainData::from_records(data.vocab, &data.train, &data.vqa, &regions, 1).unwrap()
}

#[test]
fn criterion_7_determinism() {
    let _g = serial();
    let data = small_train_data();
    let cfg = small_run_config(data.vocab.len());

    let run = || {
        let mut t = Trainer::<f64>::new(cfg.clone(), data.clone()).unwrap();
        t.train(None, None, |_| {}).unwrap();
        t
    };
    let a = run();
    let b = run();
    let identical_logs = a.log.steps_tsv() == b.log.steps_tsv() && a.log.epochs_tsv() == b.log.epochs_tsv();

    // interrupt after the first epoch, round-trip the checkpoint through disk, resume
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("epoch1.ckpt");
    let mut first = Trainer::<f64>::new(cfg.clone(), data.clone()).unwrap();
    first.run_epoch(None).unwrap();
    first.checkpoint().save(&path).unwrap();
    let resumed_from = first.log.steps.len();
    drop(first);
    let ckpt = Checkpoint::<f64>::load(&path).unwrap();
    let mut resumed = Trainer::<f64>::resume(cfg.clone(), data.clone(), ckpt).unwrap();
    resumed.train(None, None, |_| {}).unwrap();
    let continued = &a.log.steps[resumed_from..];
    let resumed_ok = resumed.log.steps.as_slice() == continued;
    let params_ok = resumed
        .params
        .store
        .iter()
        .zip(a.params.store.iter())
        .all(|(x, y)| x.value == y.value);
    let pass = identical_logs && resumed_ok && params_ok && continued.len() >= 10;
    report(
        7,
        "determinism",
        pass,
        &format!(
            "{} logged steps identical across runs: {identical_logs}; resume after step {resumed_from} reproduces {} steps: {resumed_ok}; final parameters equal: {params_ok}",
            a.log.steps.len(),
            continued.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_format_round_trips() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&SyntheticSpec {
        num_images: 10,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let paths = write_synthetic(&data, dir.path()).unwrap();
    let mut checks: Vec<(&str, bool)> = Vec::new();

    // feature store: exact values and identical bytes after a second save
    let store = FeatureStore::load(&paths.features).unwrap();
    checks.push(("features equal", store == data.features));
    let again = dir.path().join("again.bin");
    store.save(&again).unwrap();
    checks.push((
        "features bytes",
        std::fs::read(&again).unwrap() == std::fs::read(&paths.features).unwrap(),
    ));

    // datasets
    checks.push(("train dialogs", load_dialogs(&paths.train).unwrap() == data.train));
    checks.push(("heldout dialogs", load_dialogs(&paths.heldout).unwrap() == data.heldout));
    checks.push(("vqa", load_vqa(&paths.vqa).unwrap() == data.vqa));
    checks.push(("vocab", Vocabulary::load(&paths.vocab).unwrap() == data.vocab));

    // checkpoint after some training: parameters, optimizer state, RNG
    let train = small_train_data();
    let mut cfg = small_run_config(train.vocab.len());
    cfg.phase1_epochs = 1;
    cfg.phase2_epochs = 0;
    let mut t = Trainer::<f64>::new(cfg, train).unwrap();
    t.run_epoch(None).unwrap();
    let ckpt = t.checkpoint();
    let cpath = dir.path().join("c.ckpt");
    ckpt.save(&cpath).unwrap();
    let loaded = Checkpoint::<f64>::load(&cpath).unwrap();
    let bits = |c: &Checkpoint<f64>| -> Vec<u64> {
        c.params
            .store
            .iter()
            .flat_map(|p| p.value.data().iter().chain(&p.adam_m).chain(&p.adam_v).map(|v| v.to_bits()))
            .collect()
    };
    checks.push(("checkpoint params bits", bits(&loaded) == bits(&ckpt)));
    checks.push(("checkpoint rng", loaded.rng == ckpt.rng && loaded.progress == ckpt.progress));
    checks.push(("checkpoint bytes", loaded.to_bytes() == ckpt.to_bytes()));

    // malformed inputs are rejected with a diagnostic
    let mut rejections: Vec<(&str, Option<String>)> = Vec::new();
    let mut rejects = |name: &'static str, err: Option<String>| rejections.push((name, err));
    let bytes = std::fs::read(&paths.features).unwrap();
    let trunc = dir.path().join("trunc.bin");
    std::fs::write(&trunc, &bytes[..bytes.len() - 3]).unwrap();
    rejects("truncated features", FeatureStore::load(&trunc).err().map(|e| e.to_string()));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&trunc, &bad).unwrap();
    rejects("bad feature magic", FeatureStore::load(&trunc).err().map(|e| e.to_string()));
    let mut wrong_dims = FeatureStore::new(4, 3);
    wrong_dims
        .insert(1, ImageFeatures { roi: vec![0.0; 12], location: vec![0.1; 28] })
        .unwrap();
    rejects("feature dims mismatch", wrong_dims.check_dims(8, 32).err().map(|e| e.to_string()));

    let cbytes = std::fs::read(&cpath).unwrap();
    std::fs::write(&trunc, &cbytes[..cbytes.len() / 2]).unwrap();
    rejects("truncated checkpoint", Checkpoint::<f64>::load(&trunc).err().map(|e| e.to_string()));
    let mut vbad = cbytes.clone();
    vbad[8] = 99;
    std::fs::write(&trunc, &vbad).unwrap();
    rejects("checkpoint version", Checkpoint::<f64>::load(&trunc).err().map(|e| e.to_string()));

    let mut eleven = data.train[0].clone();
    while eleven.rounds.len() < 11 {
        eleven.rounds.push(eleven.rounds[0].clone());
    }
    let dpath = dir.path().join("bad.jsonl");
    // bypass validation on write by serializing by hand
    let line = serde_json_line(&eleven);
    std::fs::write(&dpath, format!("{line}\n")).unwrap();
    rejects("eleven rounds", load_dialogs(&dpath).err().map(|e| e.to_string()));
    std::fs::write(&dpath, "{\"image_id\": 1, \"question\": \"q\"}\n").unwrap();
    rejects("missing vqa answer", load_vqa(&dpath).err().map(|e| e.to_string()));
    save_records(&data.vqa[..2], &dpath).unwrap();
    let mut text = std::fs::read_to_string(&dpath).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&dpath, text).unwrap();
    let err = load_vqa(&dpath).err().map(|e| e.to_string());
    let line_ok = err.as_deref().is_some_and(|e| e.contains(":3:"));
    rejects("malformed json", err);
    checks.push(("line number in diagnostic", line_ok));
    let mut diagnostics = Vec::new();
    for (name, err) in rejections {
        checks.push((name, err.is_some()));
        diagnostics.extend(err);
    }

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let pass = failed.is_empty();
    report(
        8,
        "format round-trips",
        pass,
        &format!(
            "{} checks, failed: {failed:?}; sample diagnostic: {}",
            checks.len(),
            diagnostics.last().map_or("-", String::as_str)
        ),
    );
    assert!(pass);
}

fn serde_json_line(record: &dialrank::data::DialogRecord) -> String {
    // `save_records` validates, so a deliberately invalid record is written
    // through a plain JSON rendering of its fields instead.
    let rounds: Vec<String> = record
        .rounds
        .iter()
        .map(|r| {
            let cands: Vec<String> = r.candidates.iter().map(|c| format!("{c:?}")).collect();
            format!(
                "{{\"question\":{:?},\"answer\":{:?},\"candidates\":[{}],\"gt_index\":{}}}",
                r.question,
                r.answer,
                cands.join(","),
                r.gt_index
            )
        })
        .collect();
    format!(
        "{{\"image_id\":{},\"caption\":{:?},\"rounds\":[{}]}}",
        record.image_id,
        record.caption,
        rounds.join(",")
    )
}
