//! Preference-pair selection over MBR-ranked hypothesis lists.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mbr::RankedHypothesisSet;
use crate::model::TokenId;

/// How (winner, loser) rank pairs are drawn from a ranked list `y₁..y_N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    /// Best against worst: `(1, N)`.
    BestWorst,
    /// Best, middle, worst with `m = ⌈N/2⌉`: `(1, m), (m, N)`.
    BestMiddleWorst,
    /// Consecutive pairs: `(1, 2), (2, 3), …, (N−1, N)`.
    ConsecutivePairs,
    /// Consecutive pairs with a stride: `(1, 1+s), (1+s, 1+2s), …` while the
    /// loser rank stays within the list.
    ConsecutivePairsStride(usize),
}

impl Strategy {
    fn min_len(self) -> usize {
        match self {
            Self::BestWorst | Self::ConsecutivePairs => 2,
            Self::BestMiddleWorst => 3,
            Self::ConsecutivePairsStride(s) => s + 1,
        }
    }

    /// 1-based (winner, loser) rank pairs for a list of `n` hypotheses.
    pub fn rank_pairs(self, n: usize) -> Result<Vec<(usize, usize)>> {
        if let Self::ConsecutivePairsStride(0) = self {
            return Err(Error::InvalidConfig("stride must be at least 1".into()));
        }
        if n < self.min_len() {
            return Err(Error::TooFewHypotheses {
                strategy: self.to_string(),
                needed: self.min_len(),
                got: n,
            });
        }
        Ok(match self {
            Self::BestWorst => vec![(1, n)],
            Self::BestMiddleWorst => {
                let m = n.div_ceil(2);
                vec![(1, m), (m, n)]
            }
            Self::ConsecutivePairs => (1..n).map(|i| (i, i + 1)).collect(),
            Self::ConsecutivePairsStride(s) => (0..)
                .map(|k| (1 + k * s, 1 + (k + 1) * s))
                .take_while(|&(_, l)| l <= n)
                .collect(),
        })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BestWorst => f.write_str("bw"),
            Self::BestMiddleWorst => f.write_str("bmw"),
            Self::ConsecutivePairs => f.write_str("cp"),
            Self::ConsecutivePairsStride(s) => write!(f, "cps{s}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "bw" => Ok(Self::BestWorst),
            "bmw" => Ok(Self::BestMiddleWorst),
            "cp" => Ok(Self::ConsecutivePairs),
            _ => lower
                .strip_prefix("cps")
                .map(|rest| rest.trim_start_matches([':', '-', '=']))
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(Self::ConsecutivePairsStride)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy {s:?}"))),
        }
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// One DPO training example `(x, y_w, y_l)` with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub source_id: usize,
    pub source: Vec<TokenId>,
    pub winner: Vec<TokenId>,
    pub loser: Vec<TokenId>,
    pub winner_rank: usize,
    pub loser_rank: usize,
    pub winner_score: f64,
    pub loser_score: f64,
    pub strategy: Strategy,
}

/// Triplets for one ranked list. With `drop_identical`, pairs whose winner
/// and loser are the same token sequence are skipped (their margin is
/// identically zero); score ties between distinct sequences are kept.
pub fn select_pairs(ranked: &RankedHypothesisSet, strategy: Strategy, drop_identical: bool) -> Result<Vec<PreferenceTriplet>> {
    let pairs = strategy.rank_pairs(ranked.len())?;
    Ok(pairs
        .into_iter()
        .filter_map(|(w, l)| {
            let (winner, loser) = (ranked.at_rank(w), ranked.at_rank(l));
            if drop_identical && winner.tokens == loser.tokens {
                return None;
            }
            Some(PreferenceTriplet {
                source_id: ranked.source_id,
                source: ranked.source.clone(),
                winner: winner.tokens.clone(),
                loser: loser.tokens.clone(),
                winner_rank: w,
                loser_rank: l,
                winner_score: ranked.score_at_rank(w),
                loser_score: ranked.score_at_rank(l),
                strategy,
            })
        })
        .collect())
}

pub fn select_bw(ranked: &RankedHypothesisSet, drop_identical: bool) -> Result<Vec<PreferenceTriplet>> {
    select_pairs(ranked, Strategy::BestWorst, drop_identical)
}

pub fn select_bmw(ranked: &RankedHypothesisSet, drop_identical: bool) -> Result<Vec<PreferenceTriplet>> {
    select_pairs(ranked, Strategy::BestMiddleWorst, drop_identical)
}

pub fn select_cp(ranked: &RankedHypothesisSet, drop_identical: bool) -> Result<Vec<PreferenceTriplet>> {
    select_pairs(ranked, Strategy::ConsecutivePairs, drop_identical)
}

pub fn select_cps(ranked: &RankedHypothesisSet, stride: usize, drop_identical: bool) -> Result<Vec<PreferenceTriplet>> {
    select_pairs(ranked, Strategy::ConsecutivePairsStride(stride), drop_identical)
}

/// Applies `strategy` to every ranked list.
pub fn build_dataset(ranked: &[RankedHypothesisSet], strategy: Strategy, drop_identical: bool) -> Result<Vec<PreferenceTriplet>> {
    let mut out = Vec::new();
    for r in ranked {
        out.extend(select_pairs(r, strategy, drop_identical)?);
    }
    Ok(out)
}
