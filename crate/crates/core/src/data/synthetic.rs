//! Desk-scale synthetic visual-dialog data with planted structure.
//!
//! Each image has a theme: its region features cluster around a per-theme
//! centroid and its caption names the theme word. Every theme owns a few
//! question topics, so a question fits some images and not others. A question
//! names its topic word; the ground-truth answer repeats it next to the key
//! answer word paired with that topic. Distractor candidates answer other
//! topics; one distractor may share the key answer word and gets partial
//! relevance.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoding::{compute_location_vector, BoundingBox, Vocabulary, RESERVED};
use crate::error::{invalid, Result};

use super::features::{FeatureStore, ImageFeatures};
use super::records::{save_records, DialogRecord, DialogRound, VqaRecord, MAX_ROUNDS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_images: usize,
    pub vocab_size: usize,
    pub num_candidates: usize,
    pub regions_per_image: usize,
    pub visual_dim: usize,
    pub rounds_per_image: usize,
    pub vqa_per_image: usize,
    /// Distinct question topics, each with its own key answer word. Topic
    /// `k` belongs to theme `k % num_themes`, so this must be a multiple of
    /// `num_themes`.
    pub num_topics: usize,
    /// Distinct image themes (region-feature clusters named in captions).
    pub num_themes: usize,
    /// Trailing fraction of images whose dialogs form the held-out split.
    pub heldout_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_images: 200,
            vocab_size: 200,
            num_candidates: 20,
            regions_per_image: 8,
            visual_dim: 32,
            rounds_per_image: MAX_ROUNDS,
            vqa_per_image: 5,
            num_topics: 12,
            num_themes: 6,
            heldout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<DialogRecord>,
    pub heldout: Vec<DialogRecord>,
    /// Question-answer pairs about training images only.
    pub vqa: Vec<VqaRecord>,
    pub features: FeatureStore,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone)]
pub struct SyntheticPaths {
    pub train: PathBuf,
    pub heldout: PathBuf,
    pub vqa: PathBuf,
    pub features: PathBuf,
    pub vocab: PathBuf,
}

impl SyntheticPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train_dialogs.jsonl"),
            heldout: dir.join("heldout_dialogs.jsonl"),
            vqa: dir.join("vqa.jsonl"),
            features: dir.join("features.bin"),
            vocab: dir.join("vocab.txt"),
        }
    }
}

const OBJECT_CLASSES: u32 = 20;
const IMAGE_W: f64 = 640.0;
const IMAGE_H: f64 = 480.0;
const FEATURE_NOISE: f64 = 0.5;

struct Lexicon {
    themes: Vec<String>,
    topics: Vec<String>,
    answers: Vec<String>,
    question_fill: Vec<String>,
    answer_fill: Vec<String>,
    caption_fill: Vec<String>,
}

impl Lexicon {
    fn new(vocab_size: usize, themes: usize, topics: usize) -> Result<Self> {
        if themes < 2 || topics < 2 {
            return Err(invalid("synthetic data needs at least 2 themes and 2 topics"));
        }
        // one slot for "?"; the remainder is filler, at least two of each kind
        let fixed = RESERVED.len() + 1 + themes + 2 * topics;
        let rest = vocab_size
            .checked_sub(fixed)
            .filter(|&r| r >= 6)
            .ok_or_else(|| invalid(format!("vocab_size {vocab_size} too small for synthetic data (need >= {})", fixed + 6)))?;
        let qf = rest / 3;
        let af = rest / 3;
        let cf = rest - qf - af;
        let names = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
        Ok(Self {
            themes: names("theme", themes),
            topics: names("topic", topics),
            answers: names("ans", topics),
            question_fill: names("qw", qf),
            answer_fill: names("aw", af),
            caption_fill: names("cw", cf),
        })
    }

    fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<&str> = vec!["?"];
        for list in [
            &self.themes,
            &self.topics,
            &self.answers,
            &self.question_fill,
            &self.answer_fill,
            &self.caption_fill,
        ] {
            words.extend(list.iter().map(String::as_str));
        }
        Vocabulary::new(words)
    }

    fn pick<'a, R: Rng>(list: &'a [String], rng: &mut R) -> &'a str {
        &list[rng.random_range(0..list.len())]
    }

    fn question(&self, topic: usize) -> String {
        format!("{} ?", self.topics[topic])
    }

    fn answer<R: Rng>(&self, topic: usize, rng: &mut R) -> String {
        let filler = Self::pick(&self.answer_fill, rng);
        format!("{} {} {filler}", self.answers[topic], self.topics[topic])
    }

    fn caption<R: Rng>(&self, theme: usize, rng: &mut R) -> String {
        format!(
            "{} {} {}",
            Self::pick(&self.caption_fill, rng),
            self.themes[theme],
            Self::pick(&self.caption_fill, rng)
        )
    }
}

fn random_box<R: Rng>(class_id: u32, rng: &mut R) -> BoundingBox {
    let x1 = rng.random_range(0.0..IMAGE_W * 0.8);
    let y1 = rng.random_range(0.0..IMAGE_H * 0.8);
    let x2 = rng.random_range(x1 + 8.0..=IMAGE_W);
    let y2 = rng.random_range(y1 + 8.0..=IMAGE_H);
    BoundingBox {
        x1,
        y1,
        x2,
        y2,
        image_width: IMAGE_W,
        image_height: IMAGE_H,
        class_id,
        confidence: rng.random_range(0.5..=1.0),
    }
}

/// Deterministic in `spec`: the same arguments always produce the same data.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.num_images == 0 || spec.num_candidates < 2 || spec.regions_per_image == 0 || spec.visual_dim == 0 {
        return Err(invalid(format!("degenerate synthetic spec {spec:?}")));
    }
    if !(0.0..1.0).contains(&spec.heldout_fraction) {
        return Err(invalid(format!("heldout_fraction {} outside [0,1)", spec.heldout_fraction)));
    }
    if spec.rounds_per_image == 0 || spec.rounds_per_image > MAX_ROUNDS {
        return Err(invalid(format!("rounds_per_image must be in 1..={MAX_ROUNDS}")));
    }
    let lex = Lexicon::new(spec.vocab_size, spec.num_themes, spec.num_topics)?;
    if !spec.num_topics.is_multiple_of(spec.num_themes) {
        return Err(invalid(format!(
            "{} topics cannot be shared evenly among {} themes",
            spec.num_topics, spec.num_themes
        )));
    }
    let topics_per_theme = spec.num_topics / spec.num_themes;
    // distinct distractors per topic: one per answer filler
    let per_topic = lex.answer_fill.len();
    if spec.num_candidates - 1 > (lex.topics.len() - 1) * per_topic {
        return Err(invalid(format!(
            "cannot draw {} distinct distractors from {} topics",
            spec.num_candidates - 1,
            lex.topics.len() - 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centroids: Vec<Vec<f64>> = (0..lex.themes.len())
        .map(|_| (0..spec.visual_dim).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();

    let mut features = FeatureStore::new(spec.regions_per_image, spec.visual_dim);
    let heldout_start = spec.num_images - (spec.num_images as f64 * spec.heldout_fraction).round() as usize;
    let mut dialogs = Vec::with_capacity(spec.num_images);
    let mut vqa = Vec::with_capacity(spec.num_images * spec.vqa_per_image);
    for i in 0..spec.num_images {
        let image_id = 1000 + i as u64;
        let theme = rng.random_range(0..lex.themes.len());

        let mut roi = Vec::with_capacity(spec.regions_per_image * spec.visual_dim);
        let mut location = Vec::with_capacity(spec.regions_per_image * 7);
        for _ in 0..spec.regions_per_image {
            for &c in &centroids[theme] {
                roi.push((c + FEATURE_NOISE * std_normal.sample(&mut rng)) as f32);
            }
            let class_id = if rng.random_bool(0.7) {
                theme as u32 % OBJECT_CLASSES
            } else {
                rng.random_range(0..OBJECT_CLASSES)
            };
            let loc = compute_location_vector(&random_box(class_id, &mut rng), OBJECT_CLASSES)?;
            location.extend(loc.iter().map(|&v| v as f32));
        }
        features.insert(image_id, ImageFeatures { roi, location })?;

        let caption = lex.caption(theme, &mut rng);
        let mut rounds = Vec::with_capacity(spec.rounds_per_image);
        let topic_of = |rng: &mut ChaCha8Rng| theme + spec.num_themes * rng.random_range(0..topics_per_theme);
        for _ in 0..spec.rounds_per_image {
            let topic = topic_of(&mut rng);
            let question = lex.question(topic);
            let answer = lex.answer(topic, &mut rng);
            let mut candidates: Vec<String> = Vec::with_capacity(spec.num_candidates);
            let mut relevance = Vec::with_capacity(spec.num_candidates);
            let mut attempts = 0usize;
            while candidates.len() < spec.num_candidates - 1 {
                attempts += 1;
                if attempts > 1000 * spec.num_candidates {
                    return Err(invalid("could not draw enough distinct distractor answers"));
                }
                let mut t = rng.random_range(0..lex.topics.len() - 1);
                if t >= topic {
                    t += 1;
                }
                let c = lex.answer(t, &mut rng);
                if !candidates.contains(&c) {
                    candidates.push(c);
                    relevance.push(0.0);
                }
            }
            // sometimes a distractor shares the key answer word: partial credit
            if rng.random_bool(0.5) {
                let near = format!("{} {}", lex.answers[topic], Lexicon::pick(&lex.answer_fill, &mut rng));
                if near != answer && !candidates.contains(&near) {
                    let slot = rng.random_range(0..candidates.len());
                    candidates[slot] = near;
                    relevance[slot] = 0.5;
                }
            }
            let gt_index = rng.random_range(0..spec.num_candidates);
            candidates.insert(gt_index, answer.clone());
            relevance.insert(gt_index, 1.0);
            rounds.push(DialogRound {
                question,
                answer,
                candidates,
                gt_index,
                relevance: Some(relevance),
            });
        }
        dialogs.push(DialogRecord {
            image_id,
            caption,
            rounds,
        });
        let vqa_count = if i < heldout_start { spec.vqa_per_image } else { 0 };
        for _ in 0..vqa_count {
            let topic = topic_of(&mut rng);
            vqa.push(VqaRecord {
                image_id,
                question: lex.question(topic),
                answer: lex.answer(topic, &mut rng),
            });
        }
    }
    let heldout = dialogs.split_off(heldout_start);
    Ok(SyntheticData {
        train: dialogs,
        heldout,
        vqa,
        features,
        vocab: lex.vocabulary(),
    })
}

pub fn write_synthetic(data: &SyntheticData, dir: &Path) -> Result<SyntheticPaths> {
    fs::create_dir_all(dir)?;
    let paths = SyntheticPaths::in_dir(dir);
    save_records(&data.train, &paths.train)?;
    save_records(&data.heldout, &paths.heldout)?;
    save_records(&data.vqa, &paths.vqa)?;
    data.features.save(&paths.features)?;
    data.vocab.save(&paths.vocab)?;
    Ok(paths)
}
