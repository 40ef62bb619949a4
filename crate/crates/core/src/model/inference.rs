//! Graph-free incremental evaluation with a key/value cache.

use crate::autodiff::{axpy, dot, log_softmax_in_place};
use crate::error::{Error, Result};

use super::{check_inputs, ModelParams, TokenId, BOS, EOS, POS_EMB, SEG_EMB, SEP, TOK_EMB};

const RMS_EPS: f64 = 1e-6;

/// Decoder state after consuming `[BOS, x, SEP, y-prefix]`.
///
/// Cloning is cheap enough to branch beams.
#[derive(Clone)]
pub struct DecoderState<'a> {
    params: &'a ModelParams,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    consumed: usize,
    target_len: usize,
    log_probs: Vec<f64>,
}

impl<'a> DecoderState<'a> {
    /// Consumes the prompt `[BOS, x, SEP]`.
    pub fn new(params: &'a ModelParams, x: &[TokenId]) -> Result<Self> {
        check_inputs(params, x, &[])?;
        let layers = params.config().n_layers;
        let mut state = Self {
            params,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            consumed: 0,
            target_len: 0,
            log_probs: Vec::new(),
        };
        state.feed(BOS, 0, 0);
        for (i, &t) in x.iter().enumerate() {
            state.feed(t, i + 1, 0);
        }
        state.feed(SEP, 0, 1);
        Ok(state)
    }

    /// Log-probabilities of the next target token.
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// Number of target tokens consumed so far.
    pub fn target_len(&self) -> usize {
        self.target_len
    }

    /// Whether another target token fits within the model's maximum length.
    pub fn can_extend(&self) -> bool {
        self.consumed < self.params.config().max_len
    }

    /// Appends target token `token`.
    pub fn push(&mut self, token: TokenId) -> Result<()> {
        self.params.vocab().check(&[token])?;
        if !self.can_extend() {
            return Err(Error::Overlong {
                len: self.consumed + 1,
                max: self.params.config().max_len,
            });
        }
        self.target_len += 1;
        self.feed(token, self.target_len, 1);
        Ok(())
    }

    fn feed(&mut self, token: TokenId, position: usize, segment: usize) {
        let p = self.params;
        let cfg = p.config();
        let layout = p.layout();
        let w = p.tensors();
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();

        let mut h: Vec<f64> = w[TOK_EMB].row(token as usize).to_vec();
        axpy(&mut h, 1.0, w[POS_EMB].row(position));
        axpy(&mut h, 1.0, w[SEG_EMB].row(segment));

        let t = self.consumed + 1;
        for l in 0..cfg.n_layers {
            let s = layout.layer(l);
            let a = rms_norm(&h, w[s.attn_norm].data());
            let q = vec_mat(&a, w[s.wq].data(), d);
            let k = vec_mat(&a, w[s.wk].data(), d);
            let v = vec_mat(&a, w[s.wv].data(), d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let (keys, values) = (&self.keys[l], &self.values[l]);

            let mut cat = vec![0.0; d];
            let mut scores = vec![0.0; t];
            for head in 0..cfg.n_heads {
                let (lo, hi) = (head * hd, (head + 1) * hd);
                for (j, sc) in scores.iter_mut().enumerate() {
                    *sc = dot(&q[lo..hi], &keys[j * d + lo..j * d + hi]) * inv_sqrt;
                }
                softmax_in_place(&mut scores);
                for (j, &wt) in scores.iter().enumerate() {
                    axpy(&mut cat[lo..hi], wt, &values[j * d + lo..j * d + hi]);
                }
            }
            let o = vec_mat(&cat, w[s.wo].data(), d);
            axpy(&mut h, 1.0, &o);

            let f = rms_norm(&h, w[s.ffn_norm].data());
            let mut up = vec_mat(&f, w[s.w1].data(), cfg.d_ff);
            for u in up.iter_mut() {
                *u *= crate::autodiff::sigmoid(*u);
            }
            let down = vec_mat(&up, w[s.w2].data(), d);
            axpy(&mut h, 1.0, &down);
        }
        let hn = rms_norm(&h, w[layout.final_norm()].data());
        let mut logits = vec_mat(&hn, w[layout.out_proj()].data(), p.vocab().len());
        log_softmax_in_place(&mut logits);
        self.log_probs = logits;
        self.consumed = t;
    }
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// `x · W` for a row-major `W` of shape `len(x) × cols`.
fn vec_mat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        axpy(&mut out, xi, &w[i * cols..(i + 1) * cols]);
    }
    out
}

fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    xs.iter_mut().for_each(|x| *x /= z);
}

/// Log-probability vector of the token following `[BOS, x, SEP, y_prefix]`.
pub fn next_token_logprobs(params: &ModelParams, x: &[TokenId], y_prefix: &[TokenId]) -> Result<Vec<f64>> {
    check_inputs(params, x, y_prefix)?;
    let mut state = DecoderState::new(params, x)?;
    for &t in y_prefix {
        state.push(t)?;
    }
    Ok(state.log_probs().to_vec())
}

/// `log π(y | x)` including the closing EOS. `y` must not contain EOS.
pub fn sequence_logprob(params: &ModelParams, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
    check_inputs(params, x, y)?;
    let mut state = DecoderState::new(params, x)?;
    let mut total = 0.0;
    for &t in y {
        total += state.log_probs()[t as usize];
        state.push(t)?;
    }
    Ok(total + state.log_probs()[EOS as usize])
}
