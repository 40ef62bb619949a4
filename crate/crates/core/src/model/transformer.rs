use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::Result;

use super::{check_inputs, ModelParams, TokenId, BOS, EOS, POS_EMB, SEG_EMB, SEP, TOK_EMB};

const MASKED: f64 = -1e9;

/// Token ids, in-segment positions and segment ids for `[BOS, x, SEP, y]`.
pub(crate) fn layout_inputs(x: &[TokenId], y: &[TokenId]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n = x.len() + y.len() + 2;
    let mut tokens = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(n);
    tokens.push(BOS as usize);
    positions.push(0);
    segments.push(0);
    for (i, &t) in x.iter().enumerate() {
        tokens.push(t as usize);
        positions.push(i + 1);
        segments.push(0);
    }
    tokens.push(SEP as usize);
    positions.push(0);
    segments.push(1);
    for (i, &t) in y.iter().enumerate() {
        tokens.push(t as usize);
        positions.push(i + 1);
        segments.push(1);
    }
    (tokens, positions, segments)
}

fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            m.data_mut()[i * t + j] = MASKED;
        }
    }
    m
}

/// Final hidden states (after the output norm) for every input position.
fn hidden_states(graph: &mut Graph, w: &[NodeId], params: &ModelParams, tokens: &[usize], positions: &[usize], segments: &[usize]) -> Result<NodeId> {
    let cfg = params.config();
    let layout = params.layout();
    let t = tokens.len();
    let hd = cfg.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    let tok = graph.gather_rows(w[TOK_EMB], tokens)?;
    let pos = graph.gather_rows(w[POS_EMB], positions)?;
    let seg = graph.gather_rows(w[SEG_EMB], segments)?;
    let h = graph.add(tok, pos)?;
    let mut h = graph.add(h, seg)?;
    let mask = graph.constant(causal_mask(t));

    for l in 0..cfg.n_layers {
        let s = layout.layer(l);
        let a = graph.rms_norm(h, w[s.attn_norm])?;
        let q = graph.matmul(a, w[s.wq])?;
        let k = graph.matmul(a, w[s.wk])?;
        let v = graph.matmul(a, w[s.wv])?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let (lo, hi) = (head * hd, (head + 1) * hd);
            let qh = graph.slice_cols(q, lo, hi)?;
            let kh = graph.slice_cols(k, lo, hi)?;
            let vh = graph.slice_cols(v, lo, hi)?;
            let kt = graph.transpose(kh)?;
            let scores = graph.matmul(qh, kt)?;
            let scores = graph.scale(scores, inv_sqrt)?;
            let scores = graph.add(scores, mask)?;
            let attn = graph.softmax(scores)?;
            heads.push(graph.matmul(attn, vh)?);
        }
        let cat = graph.concat(&heads)?;
        let o = graph.matmul(cat, w[s.wo])?;
        h = graph.add(h, o)?;

        let f = graph.rms_norm(h, w[s.ffn_norm])?;
        let up = graph.matmul(f, w[s.w1])?;
        let gate = graph.sigmoid(up)?;
        let act = graph.mul(up, gate)?;
        let down = graph.matmul(act, w[s.w2])?;
        h = graph.add(h, down)?;
    }
    Ok(graph.rms_norm(h, w[layout.final_norm()])?)
}

/// Logits (`T × |V|`) for every position of `[BOS, x, SEP, y]`, with
/// parameters already bound into `graph` as `w` (see [`ModelParams::bind`]).
pub fn forward_logits(graph: &mut Graph, w: &[NodeId], params: &ModelParams, x: &[TokenId], y: &[TokenId]) -> Result<NodeId> {
    check_inputs(params, x, y)?;
    let (tokens, positions, segments) = layout_inputs(x, y);
    let h = hidden_states(graph, w, params, &tokens, &positions, &segments)?;
    Ok(graph.matmul(h, w[params.layout().out_proj()])?)
}

/// Scalar node holding `log π(y | x)`: the sum of the log-probabilities of
/// `y₁..yₘ` and the closing EOS. `y` must not contain EOS itself.
pub fn sequence_logprob_node(graph: &mut Graph, w: &[NodeId], params: &ModelParams, x: &[TokenId], y: &[TokenId]) -> Result<NodeId> {
    check_inputs(params, x, y)?;
    let (tokens, positions, segments) = layout_inputs(x, y);
    let h = hidden_states(graph, w, params, &tokens, &positions, &segments)?;
    // Rows from SEP onwards predict y₁..yₘ, EOS.
    let first = x.len() + 1;
    let rows: Vec<usize> = (first..tokens.len()).collect();
    let h = graph.gather_rows(h, &rows)?;
    let logits = graph.matmul(h, w[params.layout().out_proj()])?;
    let logp = graph.log_softmax(logits)?;
    let targets: Vec<usize> = y.iter().map(|&t| t as usize).chain([EOS as usize]).collect();
    let picked = graph.pick_per_row(logp, &targets)?;
    Ok(graph.sum(picked)?)
}
