use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::encoding::LOCATION_DIM;
use crate::error::Result;
use crate::scalar::Scalar;

use super::config::ModelConfig;

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Weights of one encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub heads: Vec<HeadIds>,
    pub output: LinearIds,
    pub attention_norm: NormIds,
    pub ffn_in: LinearIds,
    pub ffn_out: LinearIds,
    pub ffn_norm: NormIds,
}

#[derive(Debug, Clone)]
pub struct EmbeddingIds {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub roi: LinearIds,
    pub location: LinearIds,
    pub norm: NormIds,
}

/// All learnable weights: embeddings, encoder blocks, the masked-token head
/// and the quartette classifier.
#[derive(Debug, Clone)]
pub struct TransformerParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embeddings: EmbeddingIds,
    pub blocks: Vec<TransformerBlock>,
    pub token_head: LinearIds,
    pub contrastive_head: LinearIds,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'a, T, R> {
    store: ParamStore<T>,
    rng: &'a mut R,
    normal: Normal<f64>,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal => (0..n).map(|_| T::lit(self.normal.sample(self.rng))).collect(),
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        self.store.register(name, Tensor::new(shape, data)?)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<LinearIds> {
        Ok(LinearIds {
            weight: self.add(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Normal)?,
            bias: self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones)?,
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros)?,
        })
    }
}

impl<T: Scalar> TransformerParams<T> {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let dk = config.head_dim();
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
            normal: Normal::new(0.0, 0.02).expect("valid std"),
        };
        let embeddings = EmbeddingIds {
            token: b.add("embeddings.token".into(), vec![config.vocab_size, d], Init::Normal)?,
            position: b.add("embeddings.position".into(), vec![config.max_positions, d], Init::Normal)?,
            segment: b.add("embeddings.segment".into(), vec![2, d], Init::Normal)?,
            roi: b.linear("embeddings.roi", config.visual_dim, d)?,
            location: b.linear("embeddings.location", LOCATION_DIM, d)?,
            norm: b.norm("embeddings.norm", d)?,
        };
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for l in 0..config.num_blocks {
            let mut heads = Vec::with_capacity(config.num_heads);
            for h in 0..config.num_heads {
                let p = format!("blocks.{l}.attention.head{h}");
                heads.push(HeadIds {
                    query: b.add(format!("{p}.query"), vec![d, dk], Init::Normal)?,
                    key: b.add(format!("{p}.key"), vec![d, dk], Init::Normal)?,
                    value: b.add(format!("{p}.value"), vec![d, dk], Init::Normal)?,
                });
            }
            blocks.push(TransformerBlock {
                heads,
                output: b.linear(&format!("blocks.{l}.attention.output"), d, d)?,
                attention_norm: b.norm(&format!("blocks.{l}.attention.norm"), d)?,
                ffn_in: b.linear(&format!("blocks.{l}.ffn.in"), d, config.ffn_dim)?,
                ffn_out: b.linear(&format!("blocks.{l}.ffn.out"), config.ffn_dim, d)?,
                ffn_norm: b.norm(&format!("blocks.{l}.ffn.norm"), d)?,
            });
        }
        let token_head = b.linear("heads.token", d, config.vocab_size)?;
        let contrastive_head = b.linear("heads.contrastive", d, config.contrastive_classes)?;
        Ok(Self {
            config,
            store: b.store,
            embeddings,
            blocks,
            token_head,
            contrastive_head,
        })
    }

    /// Parameters of the masked-token head, which only the joint phase trains.
    pub fn token_head_ids(&self) -> [ParamId; 2] {
        [self.token_head.weight, self.token_head.bias]
    }
}
