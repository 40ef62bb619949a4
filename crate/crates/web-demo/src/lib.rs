//! WebAssembly bindings for a single-page demo of MBR ranking, preference
//! pair selection and the DPO objective. Every binding is a thin JSON
//! wrapper around a plain function that also runs natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use mbr_dpo::autodiff::{log_sigmoid, sigmoid};
use mbr_dpo::decoding::Hypothesis;
use mbr_dpo::mbr::{mbr_rank, utility_matrix, Utility, UtilityKind};
use mbr_dpo::model::Vocab;
use mbr_dpo::preference::{select_pairs, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedLine {
    pub rank: usize,
    /// 1-based line number in the input.
    pub line: usize,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankView {
    pub lines: Vec<String>,
    /// `matrix[i][j] = U(line i, line j)`.
    pub matrix: Vec<Vec<f64>>,
    pub ranked: Vec<RankedLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairView {
    pub winner_rank: usize,
    pub loser_rank: usize,
    pub winner: String,
    pub loser: String,
    pub winner_score: f64,
    pub loser_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpoView {
    pub margin: f64,
    pub loss: f64,
    /// d loss / d margin.
    pub slope: f64,
    /// `(β, loss)` over a grid of β values for the same log-probabilities.
    pub curve: Vec<(f64, f64)>,
}

struct Parsed {
    lines: Vec<String>,
    hypotheses: Vec<Hypothesis>,
    utility: Utility,
}

/// Non-blank input lines become hypotheses; whitespace separates tokens.
fn parse(text: &str, utility: &str) -> Result<Parsed, String> {
    let kind: UtilityKind = utility.parse().map_err(|e: mbr_dpo::Error| e.to_string())?;
    let lines: Vec<String> = text
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|l| !l.is_empty())
        .collect();
    if lines.is_empty() {
        return Err("enter at least one hypothesis".into());
    }
    let mut symbols: Vec<&str> = lines.iter().flat_map(|l| l.split(' ')).collect();
    symbols.sort_unstable();
    symbols.dedup();
    let vocab = Vocab::new(symbols.iter().copied()).map_err(|e| e.to_string())?;
    let hypotheses = lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            Ok(Hypothesis {
                tokens: vocab.encode(l).map_err(|e| e.to_string())?,
                log_prob: 0.0,
                sample_index: i + 1,
                truncated: false,
            })
        })
        .collect::<Result<_, String>>()?;
    Ok(Parsed {
        lines,
        hypotheses,
        utility: Utility::new(kind, vocab),
    })
}

pub fn rank_lines(text: &str, utility: &str) -> Result<RankView, String> {
    let p = parse(text, utility)?;
    let ranked = mbr_rank(0, &[], &p.hypotheses, &p.utility).map_err(|e| e.to_string())?;
    Ok(RankView {
        matrix: utility_matrix(&p.hypotheses, &p.utility),
        ranked: ranked
            .hypotheses
            .iter()
            .zip(&ranked.scores)
            .enumerate()
            .map(|(k, (h, &score))| RankedLine {
                rank: k + 1,
                line: h.sample_index,
                text: p.lines[h.sample_index - 1].clone(),
                score,
            })
            .collect(),
        lines: p.lines,
    })
}

pub fn pairs_for(text: &str, utility: &str, strategy: &str, drop_identical: bool) -> Result<Vec<PairView>, String> {
    let strategy: Strategy = strategy.parse().map_err(|e: mbr_dpo::Error| e.to_string())?;
    let p = parse(text, utility)?;
    let ranked = mbr_rank(0, &[], &p.hypotheses, &p.utility).map_err(|e| e.to_string())?;
    let triplets = select_pairs(&ranked, strategy, drop_identical).map_err(|e| e.to_string())?;
    let vocab = p.utility.vocab();
    Ok(triplets
        .into_iter()
        .map(|t| PairView {
            winner_rank: t.winner_rank,
            loser_rank: t.loser_rank,
            winner: vocab.decode(&t.winner),
            loser: vocab.decode(&t.loser),
            winner_score: t.winner_score,
            loser_score: t.loser_score,
        })
        .collect())
}

/// Margin and loss for one triplet given the four sequence log-probabilities.
pub fn dpo_point(beta: f64, policy_winner: f64, ref_winner: f64, policy_loser: f64, ref_loser: f64) -> Result<DpoView, String> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err("beta must be positive".into());
    }
    let logs = [policy_winner, ref_winner, policy_loser, ref_loser];
    if logs.iter().any(|l| !l.is_finite() || *l > 0.0) {
        return Err("log-probabilities must be finite and at most 0".into());
    }
    let diff = (policy_winner - ref_winner) - (policy_loser - ref_loser);
    let margin = beta * diff;
    let curve = (1..=40)
        .map(|k| {
            let b = 0.05 * k as f64;
            (b, -log_sigmoid(b * diff))
        })
        .collect();
    Ok(DpoView {
        margin,
        loss: -log_sigmoid(margin),
        slope: -sigmoid(-margin),
        curve,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

/// JSON [`RankView`] for newline-separated hypotheses.
#[wasm_bindgen]
pub fn rank(text: &str, utility: &str) -> Result<String, JsError> {
    to_js(rank_lines(text, utility))
}

/// JSON list of [`PairView`] for a strategy name such as `bw`, `bmw`, `cp`
/// or `cps2`.
#[wasm_bindgen]
pub fn pairs(text: &str, utility: &str, strategy: &str, drop_identical: bool) -> Result<String, JsError> {
    to_js(pairs_for(text, utility, strategy, drop_identical))
}

/// JSON [`DpoView`].
#[wasm_bindgen]
pub fn dpo(beta: f64, policy_winner: f64, ref_winner: f64, policy_loser: f64, ref_loser: f64) -> Result<String, JsError> {
    to_js(dpo_point(beta, policy_winner, ref_winner, policy_loser, ref_loser))
}
