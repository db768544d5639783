//! `dialrank`: train, evaluate, inspect rankings, and generate synthetic data.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dialrank::data::{generate_synthetic, load_dialogs, write_synthetic, SyntheticSpec};
use dialrank::evaluation::{eval_examples, evaluate_split, rank, score_candidates, write_predictions, ModelScorer};
use dialrank::train::{load_run_data, phase_name, EpochRecord};
use dialrank::{BasicTokenizer, Checkpoint64, FeatureStore, RunConfig, Trainer64};

#[derive(Parser)]
#[command(name = "dialrank", version, about = "Visual-dialog answer ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase training; writes checkpoints and tab-separated logs.
    Train(Box<TrainArgs>),
    /// Ranks every round of a dialog file and reports the retrieval metrics.
    Evaluate(EvalArgs),
    /// Prints the top candidates for one round, marking the human answer.
    Rank(RankArgs),
    /// Writes a synthetic dataset with planted question/answer structure.
    GenSynthetic(GenArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    dialogs: Option<PathBuf>,
    #[arg(long)]
    vqa: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long)]
    vqa_fraction: Option<f64>,
    #[arg(long)]
    history_turns: Option<usize>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    num_blocks: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    contrastive_classes: Option<usize>,
    #[arg(long)]
    regions_per_image: Option<usize>,
    #[arg(long)]
    visual_dim: Option<usize>,
    /// Continue from an epoch checkpoint of the same run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dialogs: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 1)]
    history_turns: usize,
    #[arg(long, default_value_t = 256)]
    max_len: usize,
    /// Tab-separated per-round score dump.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dialogs: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// 0-based index of the dialog in the file.
    #[arg(long)]
    dialog_index: usize,
    /// 0-based round within the dialog.
    #[arg(long)]
    round: usize,
    #[arg(long, default_value_t = 8)]
    top: usize,
    #[arg(long, default_value_t = 1)]
    history_turns: usize,
    #[arg(long, default_value_t = 256)]
    max_len: usize,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    num_images: usize,
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    #[arg(long, default_value_t = 20)]
    num_candidates: usize,
    #[arg(long, default_value_t = 8)]
    regions_per_image: usize,
    #[arg(long, default_value_t = 32)]
    visual_dim: usize,
}

fn run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.seed = args.seed;
    macro_rules! apply {
        ($($field:ident),*) => { $(if let Some(v) = args.$field.clone() { cfg.$field = v.into(); })* };
    }
    apply!(dialogs, vqa, features, vocab, heldout, out_dir);
    apply!(batch_size, base_lr, warmup_fraction, phase1_epochs, phase2_epochs, vqa_fraction);
    apply!(history_turns, mask_rate, max_len);
    macro_rules! apply_model {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { cfg.model.$field = v; })* };
    }
    apply_model!(num_blocks, num_heads, hidden_dim, ffn_dim, contrastive_classes, regions_per_image, visual_dim);
    Ok(cfg)
}

fn print_epoch(rec: &EpochRecord) {
    let cmtl = rec.mean_cmtl.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    print!(
        "epoch {:>3} [{}] steps {} cmtl {cmtl} ccl4 {:.4}",
        rec.epoch,
        phase_name(rec.phase),
        rec.steps,
        rec.mean_ccl4
    );
    match &rec.metrics {
        Some(m) => println!("  | {m}"),
        None => println!(),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = run_config(&args)?;
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from(format!("run-seed{}", cfg.seed)));
    // All data is loaded and validated before the first step.
    let data = load_run_data::<f64>(&cfg)?;
    cfg.model.vocab_size = data.train.vocab.len();
    cfg.validate()?;
    println!(
        "{} dialog examples, {} VQA examples ({} skipped), {} held-out rounds, vocab {}",
        data.train.dialog.len(),
        data.train.vqa.len(),
        data.train.vqa_skipped,
        data.heldout.len(),
        data.train.vocab.len()
    );
    let mut trainer = match &args.resume {
        Some(p) => {
            let ckpt = Checkpoint64::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            Trainer64::resume(cfg.clone(), data.train, ckpt)?
        }
        None => Trainer64::new(cfg.clone(), data.train)?,
    };
    std::fs::create_dir_all(&out_dir)?;
    cfg.save(&out_dir.join("run.json"))?;
    trainer.vocab().save(&out_dir.join("vocab.txt"))?;
    println!("{} optimizer steps in total", trainer.total_steps());
    let heldout = (!data.heldout.is_empty()).then_some(data.heldout.as_slice());
    trainer.train(heldout, Some(&out_dir), print_epoch)?;
    println!("checkpoints and logs in {}", out_dir.display());
    Ok(())
}

fn load_model(checkpoint: &Path, features: &Path) -> Result<(Checkpoint64, FeatureStore)> {
    let ckpt = Checkpoint64::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let store = FeatureStore::load(features).with_context(|| format!("loading features {}", features.display()))?;
    store.check_dims(ckpt.params.config.regions_per_image, ckpt.params.config.visual_dim)?;
    Ok((ckpt, store))
}

fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    let (ckpt, store) = load_model(&args.checkpoint, &args.features)?;
    let dialogs = load_dialogs(&args.dialogs)?;
    let examples = eval_examples(&dialogs, &store.region_map::<f64>()?, args.history_turns)?;
    let scorer = ModelScorer {
        params: &ckpt.params,
        vocab: &ckpt.vocab,
        tokenizer: &BasicTokenizer,
        max_len: args.max_len,
    };
    let eval = evaluate_split(&scorer, &examples)?;
    println!("{}", eval.report);
    if let Some(p) = &args.predictions {
        write_predictions(&eval.predictions, BufWriter::new(File::create(p)?))?;
        println!("predictions written to {}", p.display());
    }
    Ok(())
}

fn cmd_rank(args: RankArgs) -> Result<()> {
    let (ckpt, store) = load_model(&args.checkpoint, &args.features)?;
    let dialogs = load_dialogs(&args.dialogs)?;
    let Some(dialog) = dialogs.get(args.dialog_index) else {
        bail!("dialog index {} out of range ({} dialogs)", args.dialog_index, dialogs.len());
    };
    if args.round >= dialog.rounds.len() {
        bail!("round {} out of range ({} rounds)", args.round, dialog.rounds.len());
    }
    let examples = eval_examples(std::slice::from_ref(dialog), &store.region_map::<f64>()?, args.history_turns)?;
    let example = &examples[args.round];
    let scorer = ModelScorer {
        params: &ckpt.params,
        vocab: &ckpt.vocab,
        tokenizer: &BasicTokenizer,
        max_len: args.max_len,
    };
    let scores = score_candidates(&scorer, &example.context, &example.candidates)?;
    let ranking = rank(&scores)?;
    println!("image {}  round {}", example.image_id, args.round);
    println!("Q: {}", example.context.question);
    for (pos, &c) in ranking.order.iter().take(args.top).enumerate() {
        let mark = if c == example.candidates.gt_index { "*" } else { " " };
        println!(
            "{mark} {:>2}. {:.6}  {}",
            pos + 1,
            scores[c],
            example.candidates.candidates[c]
        );
    }
    let gt_rank = ranking.rank_of(example.candidates.gt_index)?;
    println!("human answer ranked {gt_rank} of {}", scores.len());
    Ok(())
}

fn cmd_gen_synthetic(args: GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: args.seed,
        num_images: args.num_images,
        vocab_size: args.vocab_size,
        num_candidates: args.num_candidates,
        regions_per_image: args.regions_per_image,
        visual_dim: args.visual_dim,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    let paths = write_synthetic(&data, &args.out_dir)?;
    println!(
        "{} training dialogs -> {}\n{} held-out dialogs -> {}\n{} VQA records -> {}\nfeatures -> {}\nvocabulary ({} entries) -> {}",
        data.train.len(),
        paths.train.display(),
        data.heldout.len(),
        paths.heldout.display(),
        data.vqa.len(),
        paths.vqa.display(),
        paths.features.display(),
        data.vocab.len(),
        paths.vocab.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(*a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Rank(a) => cmd_rank(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
