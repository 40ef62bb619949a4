//! Direct preference optimization against a frozen reference model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sigmoid, Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{sequence_logprob_node, ModelParams, TokenId};
use crate::optim::{warmup_lr, RmsProp, RmsPropConfig};
use crate::preference::PreferenceTriplet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    /// Warmup length as a fraction of all optimizer steps.
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle of the preference data.
    pub seed: u64,
    /// Points (as fractions of the whole run) where held-out margins are
    /// recorded.
    pub checkpoint_fractions: Vec<f64>,
    pub window: usize,
    pub rmsprop: RmsPropConfig,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.7,
            learning_rate: 1e-4,
            warmup_fraction: 0.05,
            epochs: 1,
            batch_size: 4,
            seed: 0,
            checkpoint_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            window: 20,
            rmsprop: RmsPropConfig::default(),
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be a non-negative number".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig("warmup fraction must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.window == 0 {
            return Err(Error::InvalidConfig("batch size and window must be positive".into()));
        }
        if self.checkpoint_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidConfig("checkpoint fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Margins recorded during [`dpo_finetune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginTrace {
    /// Mean batch margin at each step, measured before the update.
    pub raw: Vec<f64>,
    pub moving_average: Vec<f64>,
    pub heldout: Vec<HeldoutMargins>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutMargins {
    pub fraction: f64,
    /// Number of updates applied when the margins were taken.
    pub step: usize,
    pub margins: Vec<f64>,
}

impl HeldoutMargins {
    pub fn median(&self) -> Option<f64> {
        median(&self.margins)
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// `log π(y | x)` computed through the autodiff graph, so that policy and
/// reference terms share exactly the same arithmetic.
fn logprob(params: &ModelParams, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
    let mut g = Graph::new();
    let w = params.bind_frozen(&mut g);
    let node = sequence_logprob_node(&mut g, &w, params, x, y)?;
    Ok(g.scalar(node).expect("scalar"))
}

/// Reference log-probabilities `(log π_ref(y_w|x), log π_ref(y_l|x))`.
pub fn reference_logprobs(reference: &ModelParams, triplets: &[PreferenceTriplet]) -> Result<Vec<(f64, f64)>> {
    triplets
        .par_iter()
        .map(|t| Ok((logprob(reference, &t.source, &t.winner)?, logprob(reference, &t.source, &t.loser)?)))
        .collect()
}

/// `β·[(log π_θ(y_w|x) − log π_ref(y_w|x)) − (log π_θ(y_l|x) − log π_ref(y_l|x))]`.
pub fn reward_margin(policy: &ModelParams, reference: &ModelParams, triplet: &PreferenceTriplet, beta: f64) -> Result<f64> {
    policy.compatible_with(reference)?;
    let (rw, rl) = (
        logprob(reference, &triplet.source, &triplet.winner)?,
        logprob(reference, &triplet.source, &triplet.loser)?,
    );
    margin_given_reference(policy, triplet, (rw, rl), beta)
}

fn margin_given_reference(policy: &ModelParams, t: &PreferenceTriplet, (rw, rl): (f64, f64), beta: f64) -> Result<f64> {
    let pw = logprob(policy, &t.source, &t.winner)?;
    let pl = logprob(policy, &t.source, &t.loser)?;
    Ok(beta * ((pw - rw) - (pl - rl)))
}

/// Margins of every triplet against precomputed reference log-probabilities.
pub fn margins(policy: &ModelParams, triplets: &[PreferenceTriplet], reference: &[(f64, f64)], beta: f64) -> Result<Vec<f64>> {
    if triplets.len() != reference.len() {
        return Err(Error::LengthMismatch {
            what: "triplets and reference log-probabilities",
            left: triplets.len(),
            right: reference.len(),
        });
    }
    triplets
        .par_iter()
        .zip(reference.par_iter())
        .map(|(t, &r)| margin_given_reference(policy, t, r, beta))
        .collect()
}

/// `−log σ(M)` averaged over the batch.
pub fn dpo_loss(policy: &ModelParams, reference: &ModelParams, batch: &[PreferenceTriplet], beta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("preference batch"));
    }
    let mut total = 0.0;
    for t in batch {
        let m = reward_margin(policy, reference, t, beta)?;
        if !m.is_finite() {
            return Err(Error::Divergence { step: 0, loss: m });
        }
        total -= log_sigmoid(m);
    }
    Ok(total / batch.len() as f64)
}

/// Batch loss, per-triplet margins and the loss gradient w.r.t. every policy
/// tensor. `reference[i]` holds the frozen log-probabilities of `batch[i]`.
pub fn dpo_loss_and_grads(
    policy: &ModelParams,
    batch: &[&PreferenceTriplet],
    reference: &[(f64, f64)],
    beta: f64,
) -> Result<(f64, Vec<f64>, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Empty("preference batch"));
    }
    if batch.len() != reference.len() {
        return Err(Error::LengthMismatch {
            what: "batch and reference log-probabilities",
            left: batch.len(),
            right: reference.len(),
        });
    }
    let mut g = Graph::new();
    let w = policy.bind(&mut g);
    let mut margin_nodes = Vec::with_capacity(batch.len());
    for (t, &(rw, rl)) in batch.iter().zip(reference) {
        let pw = sequence_logprob_node(&mut g, &w, policy, &t.source, &t.winner)?;
        let pl = sequence_logprob_node(&mut g, &w, policy, &t.source, &t.loser)?;
        let rw = g.constant(Tensor::scalar(rw));
        let rl = g.constant(Tensor::scalar(rl));
        let w_ratio = g.sub(pw, rw)?;
        let l_ratio = g.sub(pl, rl)?;
        let diff = g.sub(w_ratio, l_ratio)?;
        margin_nodes.push(g.scale(diff, beta)?);
    }
    let m = g.concat(&margin_nodes)?;
    let ls = g.log_sigmoid(m)?;
    let mean = g.mean(ls)?;
    let loss = g.scale(mean, -1.0)?;
    let margins = g.value(m).data().to_vec();
    let value = g.scalar(loss).expect("scalar");
    let mut grads = g.backward(loss)?;
    let grads = w
        .iter()
        .zip(policy.tensors())
        .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, margins, grads))
}

/// Trailing mean over the last `min(window, i + 1)` values at each index `i`.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Empty("margin series"));
    }
    if window == 0 {
        return Err(Error::InvalidConfig("window must be positive".into()));
    }
    Ok((0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let part = &series[lo..=i];
            part.iter().sum::<f64>() / part.len() as f64
        })
        .collect())
}

/// Fine-tunes a copy of `base` on `triplets` while `base` itself serves as
/// the frozen reference. Held-out margins, when `heldout` is given, are
/// recorded at each configured checkpoint fraction.
pub fn dpo_finetune(
    base: &ModelParams,
    triplets: &[PreferenceTriplet],
    config: &DpoConfig,
    heldout: Option<&[PreferenceTriplet]>,
) -> Result<(ModelParams, MarginTrace)> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(Error::Empty("preference dataset"));
    }
    let reference = reference_logprobs(base, triplets)?;
    let heldout_ref = match heldout {
        Some(h) => Some((h, reference_logprobs(base, h)?)),
        None => None,
    };

    let mut policy = base.clone();
    let mut opt = RmsProp::new(config.rmsprop, policy.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = triplets.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup = (config.warmup_fraction * total_steps as f64).round() as usize;

    let mut checkpoints: Vec<(f64, usize)> = config
        .checkpoint_fractions
        .iter()
        .map(|&f| (f, (f * total_steps as f64).round() as usize))
        .collect();
    checkpoints.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut next_checkpoint = 0;
    let mut heldout_trace = Vec::new();
    let mut record = |policy: &ModelParams, step: usize, next: &mut usize| -> Result<()> {
        while *next < checkpoints.len() && checkpoints[*next].1 <= step {
            if let Some((h, r)) = &heldout_ref {
                heldout_trace.push(HeldoutMargins {
                    fraction: checkpoints[*next].0,
                    step,
                    margins: margins(policy, h, r, config.beta)?,
                });
            }
            *next += 1;
        }
        Ok(())
    };

    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut raw = Vec::with_capacity(total_steps);
    let mut step = 0;
    record(&policy, step, &mut next_checkpoint)?;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreferenceTriplet> = chunk.iter().map(|&i| &triplets[i]).collect();
            let refs: Vec<(f64, f64)> = chunk.iter().map(|&i| reference[i]).collect();
            let (loss, batch_margins, grads) = dpo_loss_and_grads(&policy, &batch, &refs, config.beta)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            raw.push(batch_margins.iter().sum::<f64>() / batch_margins.len() as f64);
            opt.step(policy.tensors_mut(), &grads, warmup_lr(config.learning_rate, step, warmup));
            if policy.tensors().iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence { step, loss });
            }
            step += 1;
            record(&policy, step, &mut next_checkpoint)?;
        }
    }
    let moving_average = if raw.is_empty() {
        Vec::new()
    } else {
        moving_average(&raw, config.window)?
    };
    Ok((
        policy,
        MarginTrace {
            raw,
            moving_average,
            heldout: heldout_trace,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::{tiny_model, tiny_vocab};
    use crate::model::{init_model, ModelConfig};
    use crate::preference::Strategy;
    use proptest::prelude::*;
    use rand::Rng;

    fn triplet(source: &[u32], winner: &[u32], loser: &[u32]) -> PreferenceTriplet {
        PreferenceTriplet {
            source_id: 0,
            source: source.to_vec(),
            winner: winner.to_vec(),
            loser: loser.to_vec(),
            winner_rank: 1,
            loser_rank: 2,
            winner_score: 0.9,
            loser_score: 0.1,
            strategy: Strategy::BestWorst,
        }
    }

    fn batch() -> Vec<PreferenceTriplet> {
        vec![
            triplet(&[4, 5, 6], &[6, 5, 4], &[6, 6]),
            triplet(&[7], &[7], &[8, 8, 8]),
            triplet(&[5, 8], &[], &[8, 5]),
        ]
    }

    /// A model whose every weight is a fresh draw; used to move `θ` away from
    /// the reference without training.
    fn perturbed(p: &ModelParams, seed: u64, scale: f64) -> ModelParams {
        let mut q = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in q.tensors_mut() {
            for v in t.data_mut() {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
        }
        q
    }

    #[test]
    fn identical_models_give_zero_margin_and_ln2_loss() {
        let p = tiny_model(3);
        for t in &batch() {
            for beta in [0.1, 0.7, 5.0] {
                assert_eq!(reward_margin(&p, &p, t, beta).unwrap(), 0.0);
            }
        }
        let loss = dpo_loss(&p, &p, &batch(), 0.7).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let refs = reference_logprobs(&p, &batch()).unwrap();
        let b = batch();
        let (l, m, _) = dpo_loss_and_grads(&p, &b.iter().collect::<Vec<_>>(), &refs, 0.7).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(m.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn margin_is_linear_in_beta() {
        let r = tiny_model(3);
        let p = perturbed(&r, 9, 0.05);
        for t in &batch() {
            let one = reward_margin(&p, &r, t, 1.0).unwrap();
            let two = reward_margin(&p, &r, t, 2.0).unwrap();
            assert!(one != 0.0);
            assert!((two / one - 2.0).abs() < 1e-10);
        }
    }

    /// With every block weight zero and a constant segment embedding, each
    /// position predicts the same distribution, so margins follow from a
    /// single probability table.
    #[test]
    fn margin_matches_hand_computation_on_a_constant_model() {
        let vocab = tiny_vocab();
        let config = ModelConfig {
            d_model: 2,
            n_heads: 1,
            n_layers: 1,
            d_ff: 2,
            max_len: 12,
            init_scale: 1.0,
        };
        let constant = |logits: &[f64]| {
            let mut p = init_model(&config, &vocab, 0).unwrap();
            let names = p.tensor_names();
            for (name, t) in names.iter().zip(p.tensors_mut()) {
                let data = t.data_mut();
                match name.as_str() {
                    "seg_emb" => data.copy_from_slice(&[1.0, 0.0, 1.0, 0.0]),
                    "final_norm" => data.copy_from_slice(&[1.0, 1.0]),
                    "out_proj" => {
                        // The normalized hidden state is (1/√(0.5 + ε), 0).
                        let h = 1.0 / (0.5 + crate::autodiff::RMS_EPS).sqrt();
                        for (j, &l) in logits.iter().enumerate() {
                            data[j] = l / h;
                            data[logits.len() + j] = 0.0;
                        }
                    }
                    _ => data.iter_mut().for_each(|v| *v = 0.0),
                }
            }
            p
        };
        let n = vocab.len();
        let mut ref_logits = vec![0.0; n];
        let mut pol_logits = vec![0.0; n];
        ref_logits[4] = 1.0;
        pol_logits[4] = 2.0;
        pol_logits[2] = 0.5;
        let (r, p) = (constant(&ref_logits), constant(&pol_logits));
        let lp = |logits: &[f64], tok: usize| logits[tok] - logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        let seq = |logits: &[f64], y: &[usize]| y.iter().map(|&t| lp(logits, t)).sum::<f64>() + lp(logits, 2);
        let t = triplet(&[5], &[4, 4], &[5]);
        let expected = 0.5 * ((seq(&pol_logits, &[4, 4]) - seq(&ref_logits, &[4, 4])) - (seq(&pol_logits, &[5]) - seq(&ref_logits, &[5])));
        let got = reward_margin(&p, &r, &t, 0.5).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn loss_decreases_with_margin() {
        let r = tiny_model(1);
        let t = vec![triplet(&[4, 5], &[5, 4], &[4])];
        let mut last = f64::INFINITY;
        for beta in [0.1, 0.5, 1.0, 4.0] {
            let p = perturbed(&r, 2, 0.2);
            let m = reward_margin(&p, &r, &t[0], beta).unwrap();
            let loss = dpo_loss(&p, &r, &t, beta).unwrap();
            assert!((loss + log_sigmoid(m)).abs() < 1e-12);
            if m > 0.0 {
                assert!(loss < last);
            } else {
                assert!(loss > std::f64::consts::LN_2);
            }
            last = loss;
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let base = tiny_model(4);
        let cfg = DpoConfig {
            learning_rate: 0.0,
            ..DpoConfig::default()
        };
        let held = batch();
        let (p, trace) = dpo_finetune(&base, &batch(), &cfg, Some(&held)).unwrap();
        assert_eq!(p, base);
        assert!(trace.raw.iter().all(|&m| m == 0.0));
        assert_eq!(trace.heldout.len(), 5);
        assert!(trace.heldout.iter().all(|h| h.margins.iter().all(|&m| m == 0.0)));
    }

    #[test]
    fn training_raises_the_margin() {
        let base = tiny_model(5);
        let data = batch();
        let cfg = DpoConfig {
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 3,
            warmup_fraction: 0.0,
            ..DpoConfig::default()
        };
        let (p, trace) = dpo_finetune(&base, &data, &cfg, Some(&data)).unwrap();
        assert_eq!(trace.raw.len(), 30);
        assert_eq!(trace.moving_average.len(), 30);
        let fractions: Vec<f64> = trace.heldout.iter().map(|h| h.fraction).collect();
        assert_eq!(fractions, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(trace.heldout.last().unwrap().step, 30);
        assert!(trace.heldout[4].median().unwrap() > trace.heldout[0].median().unwrap());
        assert!(dpo_loss(&p, &base, &data, 0.7).unwrap() < std::f64::consts::LN_2);
    }

    #[test]
    fn finetuning_is_deterministic() {
        let base = tiny_model(6);
        let cfg = DpoConfig {
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 2,
            ..DpoConfig::default()
        };
        let a = dpo_finetune(&base, &batch(), &cfg, None).unwrap();
        let b = dpo_finetune(&base, &batch(), &cfg, None).unwrap();
        assert_eq!(a, b);
        assert!(a.1.heldout.is_empty());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let base = tiny_model(0);
        assert!(dpo_finetune(&base, &[], &DpoConfig::default(), None).is_err());
        for cfg in [
            DpoConfig { beta: 0.0, ..DpoConfig::default() },
            DpoConfig { window: 0, ..DpoConfig::default() },
            DpoConfig { batch_size: 0, ..DpoConfig::default() },
        ] {
            assert!(matches!(dpo_finetune(&base, &batch(), &cfg, None), Err(Error::InvalidConfig(_))));
        }
        assert!(dpo_loss(&base, &base, &[], 0.5).is_err());
        let other = init_model(&ModelConfig { d_model: 4, ..crate::model::test_support::tiny_config() }, &tiny_vocab(), 0).unwrap();
        assert!(matches!(reward_margin(&base, &other, &batch()[0], 0.5), Err(Error::ModelMismatch(_))));
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![1.0, 1.5, 2.5, 3.5]);
        assert_eq!(moving_average(&[3.0, -1.0, 2.0], 1).unwrap(), vec![3.0, -1.0, 2.0]);
        assert_eq!(moving_average(&[0.25; 30], 20).unwrap(), vec![0.25; 30]);
        assert!(moving_average(&[], 3).is_err());
        assert!(moving_average(&[1.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn moving_average_stays_within_window_bounds(xs in prop::collection::vec(-10.0f64..10.0, 1..60), window in 1usize..25) {
            let ma = moving_average(&xs, window).unwrap();
            prop_assert_eq!(ma.len(), xs.len());
            for (i, &m) in ma.iter().enumerate() {
                let part = &xs[(i + 1).saturating_sub(window)..=i];
                let lo = part.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = part.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
            }
        }
    }
}
