//! Two-phase training: masked-token plus contrastive losses, then the
//! contrastive loss alone. Fully determined by the run seed; checkpoints at
//! epoch boundaries resume to the identical loss sequence.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, lr_at, AdamConfig, Gradients, Tape};
use crate::backbone::{forward_sequence, ModelConfig, TransformerParams};
use crate::data::{
    load_dialogs, load_vqa, Checkpoint, DialogRecord, FeatureStore, RngState, TrainProgress, VqaRecord,
};
use crate::encoding::{BasicTokenizer, TokenSequence, Tokenizer, VisualRegion, Vocabulary};
use crate::error::{invalid, Result};
use crate::evaluation::{eval_examples, evaluate_split, EvalExample, MetricReport, ModelScorer};
use crate::objectives::{
    apply_token_masking, ccl4_head, ccl4_loss, cmtl_loss, objective, MaskedBatch, Phase, QuartetteLabel,
    DEFAULT_MASK_RATE,
};
use crate::sampling::{
    build_training_quartette, convert_vqa, dialog_quartettes, mix_datasets, Quartette, QuartettePool, Source,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Share of phase-1 emissions drawn from the VQA stream.
    pub vqa_fraction: f64,
    pub history_turns: usize,
    pub mask_rate: f64,
    pub max_len: usize,
    pub dialogs: Option<PathBuf>,
    pub vqa: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Built from the training text when absent.
    pub vocab: Option<PathBuf>,
    /// Evaluated after every epoch when present.
    pub heldout: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            batch_size: 16,
            base_lr: 3e-5,
            warmup_fraction: 0.1,
            phase1_epochs: 20,
            phase2_epochs: 15,
            vqa_fraction: 0.5,
            history_turns: 1,
            mask_rate: DEFAULT_MASK_RATE,
            max_len: 256,
            dialogs: None,
            vqa: None,
            features: None,
            vocab: None,
            heldout: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if self.phase1_epochs + self.phase2_epochs == 0 {
            return Err(invalid("at least one training epoch is required"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(invalid(format!("base_lr {} must be positive", self.base_lr)));
        }
        for (name, v) in [("warmup_fraction", self.warmup_fraction), ("mask_rate", self.mask_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} {v} outside [0,1]")));
            }
        }
        // the epoch length divides by 1 - vqa_fraction
        if !(0.0..1.0).contains(&self.vqa_fraction) {
            return Err(invalid(format!("vqa_fraction {} outside [0,1)", self.vqa_fraction)));
        }
        if self.max_len == 0 || self.max_len > self.model.max_positions {
            return Err(invalid(format!(
                "max_len {} must be in 1..={}",
                self.max_len, self.model.max_positions
            )));
        }
        Ok(())
    }

    /// Reads a single JSON object (one line or pretty-printed).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| crate::Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| invalid(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.phase1_epochs {
            Phase::Both
        } else {
            Phase::Ccl4Only
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    /// Absent in the contrastive-only phase, which never runs the token head.
    pub cmtl: Option<f64>,
    pub ccl4: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub steps: u64,
    pub mean_cmtl: Option<f64>,
    pub mean_ccl4: f64,
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Both => "cmtl+ccl4",
        Phase::Ccl4Only => "ccl4",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl TrainLog {
    pub const HEADER: &'static str = "step\tepoch\tphase\tlr\tcmtl\tccl4\ttotal";

    /// Per-step rows; floats use the shortest exact decimal form so equal
    /// logs mean bit-equal values.
    pub fn steps_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.step,
                s.epoch,
                phase_name(s.phase),
                s.lr,
                opt(s.cmtl),
                s.ccl4,
                s.total
            );
        }
        out
    }

    pub fn epochs_tsv(&self) -> String {
        let mut out = String::from("epoch\tphase\tsteps\tmean_cmtl\tmean_ccl4\tndcg\tmrr\tr1\tr5\tr10\tmean_rank\n");
        for e in &self.epochs {
            let m = e.metrics;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.epoch,
                phase_name(e.phase),
                e.steps,
                opt(e.mean_cmtl),
                e.mean_ccl4,
                opt(m.map(|m| m.ndcg)),
                opt(m.map(|m| m.mrr)),
                opt(m.map(|m| m.r_at_1)),
                opt(m.map(|m| m.r_at_5)),
                opt(m.map(|m| m.r_at_10)),
                opt(m.map(|m| m.mean_rank)),
            );
        }
        out
    }
}

/// Training examples after feature lookup and VQA conversion.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub vocab: Vocabulary,
    pub dialog: Vec<Quartette<T>>,
    pub vqa: Vec<Quartette<T>>,
    /// VQA records dropped for lack of a caption or features.
    pub vqa_skipped: usize,
}

impl<T: Scalar> TrainData<T> {
    pub fn from_records(
        vocab: Vocabulary,
        dialogs: &[DialogRecord],
        vqa: &[VqaRecord],
        regions: &HashMap<u64, Arc<Vec<VisualRegion<T>>>>,
        history_turns: usize,
    ) -> Result<Self> {
        let mut dialog = Vec::new();
        for d in dialogs {
            dialog.extend(dialog_quartettes(d, regions, history_turns)?);
        }
        let captions: HashMap<u64, String> = dialogs.iter().map(|d| (d.image_id, d.caption.clone())).collect();
        let conv = convert_vqa(vqa, &captions, regions);
        Ok(Self {
            vocab,
            dialog,
            vqa: conv.quartettes,
            vqa_skipped: conv.skipped,
        })
    }
}

/// Everything `cmd_train` reads from disk, loaded and validated up front.
#[derive(Debug, Clone)]
pub struct LoadedData<T> {
    pub train: TrainData<T>,
    pub heldout: Vec<EvalExample<T>>,
    pub features: FeatureStore,
}

pub fn load_run_data<T: Scalar>(cfg: &RunConfig) -> Result<LoadedData<T>> {
    let dialogs_path = cfg.dialogs.as_deref().ok_or_else(|| invalid("config lacks a dialogs path"))?;
    let features_path = cfg.features.as_deref().ok_or_else(|| invalid("config lacks a features path"))?;
    let dialogs = load_dialogs(dialogs_path)?;
    let vqa = match &cfg.vqa {
        Some(p) => load_vqa(p)?,
        None => Vec::new(),
    };
    let heldout_records = match &cfg.heldout {
        Some(p) => load_dialogs(p)?,
        None => Vec::new(),
    };
    let features = FeatureStore::load(features_path)?;
    features.check_dims(cfg.model.regions_per_image, cfg.model.visual_dim)?;
    let regions = features.region_map::<T>()?;
    let vocab = match &cfg.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => corpus_vocabulary(&dialogs, &vqa),
    };
    let train = TrainData::from_records(vocab, &dialogs, &vqa, &regions, cfg.history_turns)?;
    let heldout = eval_examples(&heldout_records, &regions, cfg.history_turns)?;
    Ok(LoadedData {
        train,
        heldout,
        features,
    })
}

pub fn corpus_vocabulary(dialogs: &[DialogRecord], vqa: &[VqaRecord]) -> Vocabulary {
    let mut texts: Vec<&str> = Vec::new();
    for d in dialogs {
        texts.push(&d.caption);
        for r in &d.rounds {
            texts.push(&r.question);
            texts.push(&r.answer);
            texts.extend(r.candidates.iter().map(String::as_str));
        }
    }
    for v in vqa {
        texts.push(&v.question);
        texts.push(&v.answer);
    }
    Vocabulary::from_corpus(texts, &BasicTokenizer)
}

struct Prepared<T> {
    seq: TokenSequence,
    regions: Arc<Vec<VisualRegion<T>>>,
    label: QuartetteLabel,
    masked: Option<MaskedBatch>,
}

struct ExampleOutcome<T> {
    grads: Gradients<T>,
    cmtl: Option<f64>,
    ccl4: f64,
}

fn example_gradients<T: Scalar>(
    params: &TransformerParams<T>,
    item: &Prepared<T>,
    weight: T,
) -> Result<ExampleOutcome<T>> {
    let mut tape = Tape::new();
    let seq = item.masked.as_ref().map_or(&item.seq, |m| &m.masked_sequence);
    let hidden = forward_sequence(&mut tape, params, seq, &item.regions)?;
    let logits = ccl4_head(&mut tape, params, hidden)?;
    let ccl4 = ccl4_loss(&mut tape, logits, item.label)?;
    let (loss, cmtl) = match &item.masked {
        Some(m) => {
            let c = cmtl_loss(&mut tape, params, hidden, m)?;
            (objective(&mut tape, c, ccl4, Phase::Both)?, Some(tape.item(c).as_f64()))
        }
        None => (ccl4, None),
    };
    let ccl4 = tape.item(ccl4).as_f64();
    let scaled = tape.scale(loss, weight);
    Ok(ExampleOutcome {
        grads: tape.backward(scaled)?,
        cmtl,
        ccl4,
    })
}

pub struct Trainer<T> {
    pub config: RunConfig,
    pub params: TransformerParams<T>,
    pub log: TrainLog,
    data: TrainData<T>,
    pool: QuartettePool<T>,
    use_vqa: bool,
    tokenizer: BasicTokenizer,
    rng: ChaCha8Rng,
    progress: TrainProgress,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialised from the run seed.
    pub fn new(config: RunConfig, data: TrainData<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = TransformerParams::init(config.model, &mut rng)?;
        let progress = TrainProgress {
            epochs_completed: 0,
            global_step: 0,
            phase: config.phase_of(0),
        };
        Self::assemble(config, data, params, rng, progress)
    }

    /// Continues from an epoch-boundary checkpoint of a run with this config.
    pub fn resume(config: RunConfig, data: TrainData<T>, checkpoint: Checkpoint<T>) -> Result<Self> {
        config.validate()?;
        if checkpoint.params.config != config.model {
            return Err(invalid("checkpoint model config differs from the run config"));
        }
        if checkpoint.vocab != data.vocab {
            return Err(invalid("checkpoint vocabulary differs from the training vocabulary"));
        }
        if checkpoint.progress.epochs_completed as usize > config.total_epochs() {
            return Err(invalid("checkpoint is past the end of this run"));
        }
        Self::assemble(config, data, checkpoint.params, checkpoint.rng.restore(), checkpoint.progress)
    }

    fn assemble(
        config: RunConfig,
        data: TrainData<T>,
        params: TransformerParams<T>,
        rng: ChaCha8Rng,
        progress: TrainProgress,
    ) -> Result<Self> {
        if data.vocab.len() != config.model.vocab_size {
            return Err(invalid(format!(
                "model vocab_size {} but the vocabulary has {} entries",
                config.model.vocab_size,
                data.vocab.len()
            )));
        }
        if data.dialog.is_empty() {
            return Err(invalid("no dialog training examples"));
        }
        for q in data.dialog.iter().chain(&data.vqa) {
            q.validate(config.model.regions_per_image)?;
        }
        let use_vqa = config.vqa_fraction > 0.0 && config.phase1_epochs > 0;
        if use_vqa && data.vqa.is_empty() {
            return Err(invalid("vqa_fraction > 0 but no VQA examples were loaded"));
        }
        let mut examples = data.dialog.clone();
        if use_vqa {
            examples.extend(data.vqa.iter().cloned());
        }
        let pool = QuartettePool::new(examples)?;
        Ok(Self {
            config,
            params,
            log: TrainLog::default(),
            data,
            pool,
            use_vqa,
            tokenizer: BasicTokenizer,
            rng,
            progress,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.data.vocab
    }

    pub fn progress(&self) -> TrainProgress {
        self.progress
    }

    pub fn is_done(&self) -> bool {
        self.progress.epochs_completed as usize >= self.config.total_epochs()
    }

    fn vqa_fraction(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Both if self.use_vqa => self.config.vqa_fraction,
            _ => 0.0,
        }
    }

    /// Emissions per epoch: every dialog example once in expectation, plus
    /// the VQA share on top.
    pub fn epoch_len(&self, phase: Phase) -> usize {
        let n = self.data.dialog.len() as f64;
        (n / (1.0 - self.vqa_fraction(phase))).ceil() as usize
    }

    pub fn steps_in_epoch(&self, epoch: usize) -> u64 {
        self.epoch_len(self.config.phase_of(epoch)).div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        (0..self.config.total_epochs()).map(|e| self.steps_in_epoch(e)).sum()
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            params: self.params.clone(),
            vocab: self.data.vocab.clone(),
            rng: RngState::capture(&self.rng),
            progress: self.progress,
        }
    }

    fn prepare(&mut self, src: Source, phase: Phase) -> Result<Prepared<T>> {
        let index = match src {
            Source::Dialog(i) => i,
            Source::Vqa(j) => self.data.dialog.len() + j,
        };
        let sample = build_training_quartette(&self.pool, index, &mut self.rng)?;
        let seq = sample
            .quartette
            .pack(&self.data.vocab, &self.tokenizer as &dyn Tokenizer, self.config.max_len)?;
        let masked = match phase {
            Phase::Both => Some(apply_token_masking(&seq, self.config.mask_rate, &mut self.rng)?),
            Phase::Ccl4Only => None,
        };
        Ok(Prepared {
            seq,
            regions: sample.quartette.regions,
            label: sample.label,
            masked,
        })
    }

    fn step(&mut self, batch: Vec<Prepared<T>>, epoch: usize, phase: Phase, total: u64) -> Result<StepRecord> {
        let step = self.progress.global_step + 1;
        let lr = lr_at(step, total, self.config.base_lr, self.config.warmup_fraction)?;
        let weight = T::lit(1.0 / batch.len() as f64);
        let params = &self.params;
        let outcomes = batch
            .par_iter()
            .map(|item| example_gradients(params, item, weight))
            .collect::<Result<Vec<_>>>()?;

        self.params.store.zero_grad();
        let (mut cmtl, mut ccl4) = (0.0, 0.0);
        for o in &outcomes {
            self.params.store.accumulate(&o.grads);
            cmtl += o.cmtl.unwrap_or(0.0);
            ccl4 += o.ccl4;
        }
        let n = outcomes.len() as f64;
        let cmtl = (phase == Phase::Both).then_some(cmtl / n);
        let ccl4 = ccl4 / n;
        adam_step(
            self.params.store.iter_mut().filter(|p| p.grad.is_some()),
            T::lit(lr),
            AdamConfig::default(),
        )?;
        self.progress.global_step = step;
        Ok(StepRecord {
            step,
            epoch: epoch + 1,
            phase,
            lr,
            cmtl,
            ccl4,
            total: cmtl.unwrap_or(0.0) + ccl4,
        })
    }

    /// Runs the next epoch; evaluates on `heldout` afterwards when given.
    pub fn run_epoch(&mut self, heldout: Option<&[EvalExample<T>]>) -> Result<EpochRecord> {
        if self.is_done() {
            return Err(invalid("training already finished"));
        }
        let epoch = self.progress.epochs_completed as usize;
        let phase = self.config.phase_of(epoch);
        let total = self.total_steps();
        let len = self.epoch_len(phase);

        let mut dialog_order: Vec<usize> = (0..self.data.dialog.len()).collect();
        dialog_order.shuffle(&mut self.rng);
        let mut vqa_order: Vec<usize> = if self.use_vqa {
            (0..self.data.vqa.len()).collect()
        } else {
            Vec::new()
        };
        vqa_order.shuffle(&mut self.rng);
        let fraction = self.vqa_fraction(phase);
        let sources: Vec<Source> = mix_datasets(dialog_order, vqa_order, fraction, &mut self.rng)?
            .take(len)
            .collect();

        let (mut steps, mut cmtl_sum, mut ccl4_sum) = (0u64, 0.0, 0.0);
        for chunk in sources.chunks(self.config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&s| self.prepare(s, phase))
                .collect::<Result<Vec<_>>>()?;
            let rec = self.step(batch, epoch, phase, total)?;
            steps += 1;
            cmtl_sum += rec.cmtl.unwrap_or(0.0);
            ccl4_sum += rec.ccl4;
            self.log.steps.push(rec);
        }
        self.progress.epochs_completed += 1;
        self.progress.phase = phase;

        let metrics = match heldout {
            Some(ex) if !ex.is_empty() => Some(self.evaluate(ex)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            phase,
            steps,
            mean_cmtl: (phase == Phase::Both).then_some(cmtl_sum / steps as f64),
            mean_ccl4: ccl4_sum / steps as f64,
            metrics,
        };
        self.log.epochs.push(record);
        Ok(record)
    }

    pub fn evaluate(&self, examples: &[EvalExample<T>]) -> Result<MetricReport> {
        let scorer = ModelScorer {
            params: &self.params,
            vocab: &self.data.vocab,
            tokenizer: &self.tokenizer,
            max_len: self.config.max_len,
        };
        Ok(evaluate_split(&scorer, examples)?.report)
    }

    /// Trains to the end of the schedule. With `out_dir`, writes a checkpoint
    /// after every epoch plus the step and epoch logs. `on_epoch` sees each
    /// finished epoch.
    pub fn train(
        &mut self,
        heldout: Option<&[EvalExample<T>]>,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        while !self.is_done() {
            let rec = self.run_epoch(heldout)?;
            on_epoch(&rec);
            if let Some(dir) = out_dir {
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join(format!("epoch-{:03}.ckpt", rec.epoch)))?;
                ckpt.save(&dir.join("last.ckpt"))?;
                fs::write(dir.join("train_log.tsv"), self.log.steps_tsv())?;
                fs::write(dir.join("epoch_log.tsv"), self.log.epochs_tsv())?;
            }
        }
        Ok(())
    }
}
