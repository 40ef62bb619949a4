//! Small decoder-only conditional language model `π(y | x)`.
//!
//! A source/target pair is laid out as `[BOS, x₁..xₙ, SEP, y₁..yₘ, EOS]`.
//! Positions are counted within each segment (BOS and SEP sit at position 0
//! of their segment) and a learned segment embedding tells the two apart, so
//! target position `i` can find source position `i + 1` by content-free
//! position matching. Only the `y` and `EOS` predictions carry loss.
//!
//! Blocks are pre-norm (RMS norm) with multi-head causal self-attention and a
//! SiLU feed-forward layer; there are no bias terms.

mod checkpoint;
mod inference;
mod train;
mod transformer;
pub mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use inference::{next_token_logprobs, sequence_logprob, DecoderState};
pub use train::{mle_loss_and_grads, next_token_accuracy, sequence_nll, train_mle, MleConfig, MleReport};
pub use transformer::{forward_logits, sequence_logprob_node};
pub use vocab::{TokenId, Vocab, BOS, EOS, PAD, SEP};

/// Architecture hyper-parameters. The vocabulary size comes from the
/// [`Vocab`] the model is built over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Upper bound on `len(x) + len(y) + 2` input positions.
    pub max_len: usize,
    /// Multiplier on the default uniform initialization ranges.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_len: 48,
            init_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if vocab_size == 0 {
            return bad("vocabulary size must be positive");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return bad("model dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_len < 3 {
            return bad("max_len must allow at least BOS, SEP and one token");
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return bad("init_scale must be positive and finite");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Named position of each tensor in [`ModelParams::tensors`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    n_layers: usize,
}

pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;
pub(crate) const SEG_EMB: usize = 2;
const PER_LAYER: usize = 8;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSlots {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w1: usize,
    pub w2: usize,
}

impl Layout {
    pub fn layer(self, l: usize) -> LayerSlots {
        let b = 3 + PER_LAYER * l;
        LayerSlots {
            attn_norm: b,
            wq: b + 1,
            wk: b + 2,
            wv: b + 3,
            wo: b + 4,
            ffn_norm: b + 5,
            w1: b + 6,
            w2: b + 7,
        }
    }

    pub fn final_norm(self) -> usize {
        3 + PER_LAYER * self.n_layers
    }

    pub fn out_proj(self) -> usize {
        self.final_norm() + 1
    }
}

/// All learnable weights plus the configuration and vocabulary they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    vocab: Vocab,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout {
            n_layers: self.config.n_layers,
        }
    }

    pub(crate) fn from_parts(config: ModelConfig, vocab: Vocab, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate(vocab.len())?;
        let expected = expected_shapes(&config, vocab.len());
        if tensors.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} holds non-finite values")));
            }
        }
        Ok(Self {
            config,
            vocab,
            tensors,
        })
    }

    /// Both models share architecture and vocabulary.
    pub fn compatible_with(&self, other: &ModelParams) -> Result<()> {
        if self.config != other.config {
            return Err(Error::ModelMismatch("model configurations differ".into()));
        }
        if self.vocab != other.vocab {
            return Err(Error::ModelMismatch("vocabularies differ".into()));
        }
        Ok(())
    }

    /// Tensor names in storage order.
    pub fn tensor_names(&self) -> Vec<String> {
        expected_shapes(&self.config, self.vocab.len())
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    /// Binds every tensor as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| graph.param(t.clone())).collect()
    }

    /// Binds every tensor as a constant of `graph`.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| graph.constant(t.clone())).collect()
    }
}

fn expected_shapes(config: &ModelConfig, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![vocab_size, d]),
        ("pos_emb".to_string(), vec![config.max_len + 1, d]),
        ("seg_emb".to_string(), vec![2, d]),
    ];
    for l in 0..config.n_layers {
        out.push((format!("layer{l}.attn_norm"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("layer{l}.{w}"), vec![d, d]));
        }
        out.push((format!("layer{l}.ffn_norm"), vec![d]));
        out.push((format!("layer{l}.w1"), vec![d, config.d_ff]));
        out.push((format!("layer{l}.w2"), vec![config.d_ff, d]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("out_proj".to_string(), vec![d, vocab_size]));
    out
}

/// Deterministic scaled-uniform initialization.
///
/// Weight matrices draw from `U(-a, a)` with `a = init_scale·√(3 / fan_in)`
/// (unit-variance outputs for unit-variance inputs); residual output
/// projections are further divided by `√(2·n_layers)`, the output projection
/// by 4, and norm gains start at 1.
pub fn init_model(config: &ModelConfig, vocab: &Vocab, seed: u64) -> Result<ModelParams> {
    config.validate(vocab.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.init_scale;
    let residual = 1.0 / ((2 * config.n_layers) as f64).sqrt();
    let tensors = expected_shapes(config, vocab.len())
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with("norm") {
                return Tensor::filled(&shape, 1.0);
            }
            let fan_in = shape[0] as f64;
            let a = match name.as_str() {
                "tok_emb" | "pos_emb" | "seg_emb" => s * 3f64.sqrt() * 0.5,
                "out_proj" => s * (3.0 / config.d_model as f64).sqrt() * 0.25,
                n if n.ends_with("wo") || n.ends_with("w2") => s * (3.0 / fan_in).sqrt() * residual,
                _ => s * (3.0 / fan_in).sqrt(),
            };
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::new(shape, data).expect("shape matches data")
        })
        .collect();
    ModelParams::from_parts(config.clone(), vocab.clone(), tensors)
}

/// Total number of input positions for source `x` and target prefix `y`.
pub(crate) fn input_len(x: &[TokenId], y: &[TokenId]) -> usize {
    x.len() + y.len() + 2
}

pub(crate) fn check_inputs(params: &ModelParams, x: &[TokenId], y: &[TokenId]) -> Result<()> {
    params.vocab.check(x)?;
    params.vocab.check(y)?;
    let len = input_len(x, y);
    if len > params.config.max_len {
        return Err(Error::Overlong {
            len,
            max: params.config.max_len,
        });
    }
    Ok(())
}
