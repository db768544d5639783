//! Binary model checkpoint: config, vocabulary, every named parameter with its
//! Adam state, the trainer RNG state, and progress counters.
//!
//! All integers little-endian; parameter values are written as `f64`, which
//! represents both supported scalar types exactly.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ModelConfig, TransformerParams};
use crate::encoding::{Vocabulary, RESERVED};
use crate::error::{Error, Result};
use crate::objectives::Phase;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRNKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainProgress {
    pub epochs_completed: u64,
    pub global_step: u64,
    pub phase: Phase,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub params: TransformerParams<T>,
    pub vocab: Vocabulary,
    pub rng: RngState,
    pub progress: TrainProgress,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(u32::try_from(s.len()).expect("short string"));
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values<T: Scalar>(&mut self, vs: &[T]) {
        for &v in vs {
            self.f64(v.as_f64());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

type ReadResult<T> = std::result::Result<T, String>;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> ReadResult<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        if end > self.bytes.len() {
            return Err(format!("truncated at byte {} (need {n} more)", self.pos));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> ReadResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> ReadResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> ReadResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn u128(&mut self) -> ReadResult<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16")))
    }
    fn usize(&mut self) -> ReadResult<usize> {
        usize::try_from(self.u64()?).map_err(|_| "size overflow".to_string())
    }
    fn f64(&mut self) -> ReadResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn str(&mut self) -> ReadResult<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
    fn values<T: Scalar>(&mut self, n: usize) -> ReadResult<Vec<T>> {
        (0..n)
            .map(|_| {
                let v = self.f64()?;
                T::from_f64(v).ok_or_else(|| format!("value {v} not representable"))
            })
            .collect()
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let c = &self.params.config;
        for v in [
            c.num_blocks,
            c.num_heads,
            c.hidden_dim,
            c.ffn_dim,
            c.vocab_size,
            c.max_positions,
            c.visual_dim,
            c.regions_per_image,
            c.contrastive_classes,
        ] {
            w.usize(v);
        }
        w.f64(c.layer_norm_eps);
        w.u64(self.progress.epochs_completed);
        w.u64(self.progress.global_step);
        w.u8(match self.progress.phase {
            Phase::Both => 0,
            Phase::Ccl4Only => 1,
        });
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u32(self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            w.str(t);
        }
        w.u32(self.params.store.len() as u32);
        for p in self.params.store.iter() {
            w.str(&p.name);
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.usize(d);
            }
            w.u64(p.step_count);
            w.values(p.value.data());
            w.values(&p.adam_m);
            w.values(&p.adam_v);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> ReadResult<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let config = ModelConfig {
            num_blocks: r.usize()?,
            num_heads: r.usize()?,
            hidden_dim: r.usize()?,
            ffn_dim: r.usize()?,
            vocab_size: r.usize()?,
            max_positions: r.usize()?,
            visual_dim: r.usize()?,
            regions_per_image: r.usize()?,
            contrastive_classes: r.usize()?,
            layer_norm_eps: r.f64()?,
        };
        config.validate().map_err(|e| e.to_string())?;
        let progress = TrainProgress {
            epochs_completed: r.u64()?,
            global_step: r.u64()?,
            phase: match r.u8()? {
                0 => Phase::Both,
                1 => Phase::Ccl4Only,
                other => return Err(format!("unknown phase tag {other}")),
            },
        };
        let rng = RngState {
            seed: r.take(32)?.try_into().expect("32"),
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let vocab_len = r.u32()? as usize;
        let tokens = (0..vocab_len).map(|_| r.str()).collect::<ReadResult<Vec<_>>>()?;
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err("vocabulary does not start with the reserved tokens".into());
        }
        let vocab = Vocabulary::new(&tokens[RESERVED.len()..]);
        if vocab.len() != tokens.len() {
            return Err("vocabulary contains duplicates".into());
        }

        let mut params = TransformerParams::<T>::init(config, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
        let count = r.u32()? as usize;
        if count != params.store.len() {
            return Err(format!("{count} parameters stored, config implies {}", params.store.len()));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name = r.str()?;
            let id = params.store.id(&name).ok_or_else(|| format!("unexpected parameter `{name}`"))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(format!("parameter `{name}` stored twice"));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.usize()).collect::<ReadResult<Vec<_>>>()?;
            let p = params.store.get_mut(id);
            if shape != p.value.shape() {
                return Err(format!("parameter `{name}` has shape {shape:?}, expected {:?}", p.value.shape()));
            }
            let n = p.value.len();
            p.step_count = r.u64()?;
            let values = r.values::<T>(n)?;
            p.value.data_mut().copy_from_slice(&values);
            p.adam_m = r.values(n)?;
            p.adam_v = r.values(n)?;
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self {
            params,
            vocab,
            rng,
            progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|message| Error::Format {
            path: path.to_owned(),
            message,
        })
    }
}
