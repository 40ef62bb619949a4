//! Maximum-likelihood training of the base model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::optim::{warmup_lr, RmsProp, RmsPropConfig};
use crate::tasks::SentencePair;

use super::{sequence_logprob, sequence_logprob_node, DecoderState, ModelParams, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Warmup length as a fraction of all optimizer steps.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub rmsprop: RmsPropConfig,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            learning_rate: 2e-3,
            warmup_fraction: 0.05,
            seed: 0,
            rmsprop: RmsPropConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleReport {
    /// Mean per-token negative log-likelihood of each epoch, as seen by the
    /// optimizer (parameters change within the epoch).
    pub epoch_nll: Vec<f64>,
    pub steps: usize,
}

/// Sum of target-token NLL and the number of predicted tokens, plus gradients.
pub(crate) fn batch_nll_grads(params: &ModelParams, batch: &[&SentencePair]) -> Result<(f64, usize, Vec<Tensor>)> {
    let mut g = Graph::new();
    let w = params.bind(&mut g);
    let mut terms = Vec::with_capacity(batch.len());
    let mut tokens = 0;
    for pair in batch {
        terms.push(sequence_logprob_node(&mut g, &w, params, &pair.source, &pair.target)?);
        tokens += pair.target.len() + 1;
    }
    let stacked = g.concat(&terms)?;
    let total = g.sum(stacked)?;
    let loss = g.scale(total, -1.0 / tokens as f64)?;
    let mut grads = g.backward(loss)?;
    let grads = w
        .iter()
        .zip(params.tensors())
        .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((-g.scalar(total).expect("scalar"), tokens, grads))
}

/// Mean per-token loss over `batch` and its gradient w.r.t. every tensor.
pub fn mle_loss_and_grads(params: &ModelParams, batch: &[&SentencePair]) -> Result<(f64, Vec<Tensor>)> {
    let (nll, tokens, grads) = batch_nll_grads(params, batch)?;
    Ok((nll / tokens as f64, grads))
}

/// Trains `params` on `corpus` with per-token cross-entropy and RMSProp.
pub fn train_mle(params: &ModelParams, corpus: &[SentencePair], config: &MleConfig) -> Result<(ModelParams, MleReport)> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
    }
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batches_per_epoch = corpus.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let warmup = (config.warmup_fraction * total_steps as f64).round() as usize;
    let mut opt = RmsProp::new(config.rmsprop, params.tensors());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_nll = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut nll_sum, mut token_sum) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SentencePair> = chunk.iter().map(|&i| &corpus[i]).collect();
            let (nll, tokens, grads) = batch_nll_grads(&params, &batch).map_err(|e| match e {
                Error::Autodiff(_) => Error::Divergence { step, loss: f64::NAN },
                other => other,
            })?;
            if !nll.is_finite() {
                return Err(Error::Divergence { step, loss: nll });
            }
            opt.step(params.tensors_mut(), &grads, warmup_lr(config.learning_rate, step, warmup));
            if params.tensors().iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence { step, loss: nll });
            }
            nll_sum += nll;
            token_sum += tokens;
            step += 1;
        }
        epoch_nll.push(nll_sum / token_sum as f64);
    }
    Ok((params, MleReport { epoch_nll, steps: step }))
}

/// Mean per-token NLL of `pairs` (targets plus EOS).
pub fn sequence_nll(params: &ModelParams, pairs: &[SentencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let mut nll = 0.0;
    let mut tokens = 0;
    for p in pairs {
        nll -= sequence_logprob(params, &p.source, &p.target)?;
        tokens += p.target.len() + 1;
    }
    Ok(nll / tokens as f64)
}

/// Teacher-forced next-token accuracy over target tokens and EOS; argmax
/// ties go to the lower id.
pub fn next_token_accuracy(params: &ModelParams, pairs: &[SentencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for p in pairs {
        let mut state = DecoderState::new(params, &p.source)?;
        for (k, &t) in p.target.iter().chain([&EOS]).enumerate() {
            if crate::decoding::argmax(state.log_probs()) == t {
                hits += 1;
            }
            total += 1;
            if k < p.target.len() {
                state.push(t)?;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::tiny_model;

    fn pair(s: &[u32], t: &[u32]) -> SentencePair {
        SentencePair {
            source: s.to_vec(),
            target: t.to_vec(),
        }
    }

    #[test]
    fn memorizes_two_sentences() {
        let corpus = vec![pair(&[4, 5, 6], &[6, 5, 4]), pair(&[7, 8], &[8, 7])];
        let p = tiny_model(0);
        let cfg = MleConfig {
            epochs: 200,
            batch_size: 2,
            learning_rate: 1e-2,
            warmup_fraction: 0.0,
            seed: 1,
            ..MleConfig::default()
        };
        let (trained, report) = train_mle(&p, &corpus, &cfg).unwrap();
        assert_eq!(report.steps, 200);
        assert!(report.epoch_nll.last().unwrap() < report.epoch_nll.first().unwrap());
        assert!(sequence_nll(&trained, &corpus).unwrap() < 0.5 * sequence_nll(&p, &corpus).unwrap());
        assert_eq!(next_token_accuracy(&trained, &corpus).unwrap(), 1.0);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let p = tiny_model(0);
        assert!(matches!(train_mle(&p, &[], &MleConfig::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = vec![pair(&[4, 5], &[5, 4]), pair(&[6], &[6]), pair(&[7, 7, 8], &[8])];
        let p = tiny_model(2);
        let cfg = MleConfig {
            epochs: 3,
            batch_size: 2,
            ..MleConfig::default()
        };
        let a = train_mle(&p, &corpus, &cfg).unwrap();
        let b = train_mle(&p, &corpus, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
