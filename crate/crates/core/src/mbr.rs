//! Sentence-level utilities and sampling-based minimum Bayes risk ranking.
//!
//! The sampled set serves as both the candidate space and the evidence
//! (pseudo-reference) space. A candidate's score is its mean utility against
//! every member of the set, itself included:
//! `S(y) = (1/|H|) Σ_{y'∈H} U(y, y')`.

use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::Hypothesis;
use crate::error::{Error, Result};
use crate::model::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    Chrf,
    SentenceBleu,
}

impl std::fmt::Display for UtilityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Chrf => "chrf",
            Self::SentenceBleu => "sentence_bleu",
        })
    }
}

impl std::str::FromStr for UtilityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chrf" => Ok(Self::Chrf),
            "sentence_bleu" | "bleu" => Ok(Self::SentenceBleu),
            other => Err(Error::InvalidConfig(format!("unknown utility {other:?}"))),
        }
    }
}

pub const CHRF_MAX_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;
pub const BLEU_MAX_ORDER: usize = 4;

/// Character n-gram F-score over orders `1..=6` with `β = 2`.
///
/// Both strings have all whitespace removed before n-gram extraction.
/// Precision and recall are each averaged uniformly over the orders for which
/// either side has at least one n-gram; an order missing on one side only
/// contributes zero. Returns 0 when either side is empty.
pub fn chrf(hypothesis: &str, reference: &str) -> f64 {
    let hyp: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    let refr: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if hyp.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let (mut precision, mut recall, mut orders) = (0.0, 0.0, 0usize);
    for n in 1..=CHRF_MAX_ORDER {
        let (h, r) = (ngram_counts(&hyp, n), ngram_counts(&refr, n));
        let (h_total, r_total) = (hyp.len().saturating_sub(n - 1), refr.len().saturating_sub(n - 1));
        if h_total == 0 && r_total == 0 {
            continue;
        }
        orders += 1;
        let matches = overlap(&h, &r) as f64;
        if h_total > 0 {
            precision += matches / h_total as f64;
        }
        if r_total > 0 {
            recall += matches / r_total as f64;
        }
    }
    let (p, r) = (precision / orders as f64, recall / orders as f64);
    let b2 = CHRF_BETA * CHRF_BETA;
    let denom = b2 * p + r;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / denom
    }
}

/// Token-level BLEU up to 4-grams for a single sentence pair.
///
/// Unigram precision is unsmoothed; orders 2–4 use add-one smoothing
/// `(m + 1) / (c + 1)`. The brevity penalty is `exp(1 − r/c)` when the
/// hypothesis is shorter than the reference. Returns 0 for an empty side or
/// no unigram match.
pub fn sentence_bleu<T: Eq + Hash>(hypothesis: &[T], reference: &[T]) -> f64 {
    let (c, r) = (hypothesis.len(), reference.len());
    if c == 0 || r == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_MAX_ORDER {
        let matches = overlap(&ngram_counts(hypothesis, n), &ngram_counts(reference, n)) as f64;
        let count = c.saturating_sub(n - 1) as f64;
        let p = if n == 1 {
            if matches == 0.0 {
                return 0.0;
            }
            matches / count
        } else {
            (matches + 1.0) / (count + 1.0)
        };
        log_sum += p.ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_sum / BLEU_MAX_ORDER as f64).exp()
}

fn ngram_counts<T: Eq + Hash>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn overlap<T: Eq + Hash>(a: &HashMap<&[T], usize>, b: &HashMap<&[T], usize>) -> usize {
    a.iter().map(|(k, &ca)| b.get(k).map_or(0, |&cb| ca.min(cb))).sum()
}

/// A utility over token-id sequences, bound to the vocabulary that gives the
/// ids their surface form.
#[derive(Debug, Clone, PartialEq)]
pub struct Utility {
    kind: UtilityKind,
    vocab: Vocab,
}

impl Utility {
    pub fn new(kind: UtilityKind, vocab: Vocab) -> Self {
        Self { kind, vocab }
    }

    pub fn kind(&self) -> UtilityKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// `U(candidate, reference)` in `[0, 1]`.
    pub fn score(&self, candidate: &[TokenId], reference: &[TokenId]) -> f64 {
        match self.kind {
            UtilityKind::Chrf => chrf(&self.vocab.decode(candidate), &self.vocab.decode(reference)),
            UtilityKind::SentenceBleu => sentence_bleu(candidate, reference),
        }
    }
}

/// `m[i][j] = U(h_i, h_j)`: candidate `i` scored against pseudo-reference `j`.
pub fn utility_matrix(hypotheses: &[Hypothesis], utility: &Utility) -> Vec<Vec<f64>> {
    hypotheses
        .par_iter()
        .map(|c| hypotheses.iter().map(|r| utility.score(&c.tokens, &r.tokens)).collect())
        .collect()
}

/// Monte-Carlo risk scores aligned with the input order.
pub fn mbr_scores(hypotheses: &[Hypothesis], utility: &Utility) -> Result<Vec<f64>> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    Ok(scores_from_matrix(&utility_matrix(hypotheses, utility)))
}

/// Row means of a utility matrix. Each row is summed in ascending order so a
/// score depends only on the multiset of its utilities, not on set order.
pub fn scores_from_matrix(matrix: &[Vec<f64>]) -> Vec<f64> {
    matrix
        .iter()
        .map(|row| {
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.iter().sum::<f64>() / row.len() as f64
        })
        .collect()
}

/// Hypotheses for one source, best MBR score first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHypothesisSet {
    pub source_id: usize,
    pub source: Vec<TokenId>,
    pub hypotheses: Vec<Hypothesis>,
    /// `scores[k]` belongs to `hypotheses[k]`; non-increasing.
    pub scores: Vec<f64>,
    pub utility: UtilityKind,
}

impl RankedHypothesisSet {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    /// Hypothesis at 1-based `rank`.
    pub fn at_rank(&self, rank: usize) -> &Hypothesis {
        &self.hypotheses[rank - 1]
    }

    pub fn score_at_rank(&self, rank: usize) -> f64 {
        self.scores[rank - 1]
    }
}

/// Input positions ordered by descending score, ties by ascending sample index.
pub fn rank_order(hypotheses: &[Hypothesis], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..hypotheses.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(hypotheses[a].sample_index.cmp(&hypotheses[b].sample_index))
    });
    order
}

pub fn mbr_rank(source_id: usize, source: &[TokenId], hypotheses: &[Hypothesis], utility: &Utility) -> Result<RankedHypothesisSet> {
    let scores = mbr_scores(hypotheses, utility)?;
    let order = rank_order(hypotheses, &scores);
    Ok(RankedHypothesisSet {
        source_id,
        source: source.to_vec(),
        hypotheses: order.iter().map(|&i| hypotheses[i].clone()).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
        utility: utility.kind(),
    })
}

/// The minimum-Bayes-risk choice: the top of [`mbr_rank`].
pub fn mbr_decode(hypotheses: &[Hypothesis], utility: &Utility) -> Result<Hypothesis> {
    let scores = mbr_scores(hypotheses, utility)?;
    let order = rank_order(hypotheses, &scores);
    Ok(hypotheses[order[0]].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::new(["a", "b", "c", "d", "e"]).unwrap()
    }

    fn hyp(tokens: &[TokenId], index: usize) -> Hypothesis {
        Hypothesis {
            tokens: tokens.to_vec(),
            log_prob: -1.0,
            sample_index: index,
            truncated: false,
        }
    }

    #[test]
    fn chrf_reference_cases() {
        assert_eq!(chrf("a b c", "a b c"), 1.0);
        assert_eq!(chrf("abc", "xyz"), 0.0);
        assert_eq!(chrf("", "abc"), 0.0);
        assert_eq!(chrf("a", "a"), 1.0);
        // Per-order P = R = (3/4, 2/3, 1/2, 0) over four present orders.
        assert!((chrf("abcd", "abce") - 0.479_166_666_666_666_7).abs() < 1e-9);
    }

    #[test]
    fn chrf_ignores_whitespace_placement() {
        assert_eq!(chrf("ab cd", "abcd"), 1.0);
    }

    #[test]
    fn bleu_reference_cases() {
        assert_eq!(sentence_bleu(&["a", "b", "c"], &["a", "b", "c"]), 1.0);
        assert_eq!(sentence_bleu::<&str>(&[], &["a"]), 0.0);
        let r: Vec<u32> = (0..10).collect();
        let got = sentence_bleu(&[0u32], &r);
        assert!((got - (1.0f64 - 10.0).exp()).abs() < 1e-15);
        let abcd = sentence_bleu(&["a", "b", "c", "d"], &["a", "b", "c", "e"]);
        assert!((abcd - 0.658_037_006_476_246_2).abs() < 1e-9, "{abcd}");
    }

    #[test]
    fn score_of_singleton_is_self_utility() {
        let u = Utility::new(UtilityKind::Chrf, vocab());
        let h = vec![hyp(&[4, 5, 6], 1)];
        assert_eq!(mbr_scores(&h, &u).unwrap(), vec![1.0]);
        assert_eq!(mbr_decode(&h, &u).unwrap(), h[0]);
    }

    #[test]
    fn identical_hypotheses_keep_sample_order() {
        let u = Utility::new(UtilityKind::SentenceBleu, vocab());
        let h: Vec<_> = (1..=5).map(|i| hyp(&[4, 5], i)).collect();
        let ranked = mbr_rank(0, &[4], &h, &u).unwrap();
        assert!(ranked.scores.iter().all(|&s| s == 1.0));
        let idx: Vec<_> = ranked.hypotheses.iter().map(|h| h.sample_index).collect();
        assert_eq!(idx, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn empty_set_is_an_error() {
        let u = Utility::new(UtilityKind::Chrf, vocab());
        assert!(mbr_scores(&[], &u).is_err());
        assert!(mbr_decode(&[], &u).is_err());
        assert!(mbr_rank(0, &[], &[], &u).is_err());
    }

    #[test]
    fn utility_kind_parses() {
        assert_eq!("chrf".parse::<UtilityKind>().unwrap(), UtilityKind::Chrf);
        assert_eq!("sentence_bleu".parse::<UtilityKind>().unwrap(), UtilityKind::SentenceBleu);
        assert!("bleurt".parse::<UtilityKind>().is_err());
    }

    fn arb_set() -> impl Strategy<Value = Vec<Vec<TokenId>>> {
        prop::collection::vec(prop::collection::vec(4u32..9, 0..7), 1..9)
    }

    proptest! {
        #[test]
        fn utilities_are_bounded_with_unit_self_score(
            a in prop::collection::vec(4u32..9, 0..10),
            b in prop::collection::vec(4u32..9, 0..10),
        ) {
            for kind in [UtilityKind::Chrf, UtilityKind::SentenceBleu] {
                let u = Utility::new(kind, vocab());
                let s = u.score(&a, &b);
                prop_assert!((0.0..=1.0).contains(&s));
                if !a.is_empty() {
                    prop_assert_eq!(u.score(&a, &a), 1.0);
                }
            }
        }

        #[test]
        fn scores_are_permutation_invariant(set in arb_set(), rot in 0usize..8) {
            let u = Utility::new(UtilityKind::Chrf, vocab());
            let h: Vec<_> = set.iter().enumerate().map(|(i, t)| hyp(t, i + 1)).collect();
            let mut shuffled = h.clone();
            let k = rot % h.len();
            shuffled.rotate_left(k);
            let a = mbr_scores(&h, &u).unwrap();
            let b = mbr_scores(&shuffled, &u).unwrap();
            for (i, s) in a.iter().enumerate() {
                let j = (i + h.len() - k) % h.len();
                prop_assert_eq!(s.to_bits(), b[j].to_bits());
            }
            prop_assert_eq!(mbr_decode(&h, &u).unwrap(), mbr_decode(&shuffled, &u).unwrap());
        }

        #[test]
        fn duplicating_a_candidate_does_not_lower_its_score(set in arb_set(), pick in 0usize..8) {
            let u = Utility::new(UtilityKind::Chrf, vocab());
            let h: Vec<_> = set.iter().enumerate().map(|(i, t)| hyp(t, i + 1)).collect();
            let k = pick % h.len();
            prop_assume!(!h[k].tokens.is_empty());
            let before = mbr_scores(&h, &u).unwrap()[k];
            let mut grown = h.clone();
            grown.push(hyp(&h[k].tokens, h.len() + 1));
            let after = mbr_scores(&grown, &u).unwrap()[k];
            prop_assert!(after >= before - 1e-15);
        }

        #[test]
        fn ranking_is_sorted_permutation(set in arb_set()) {
            let u = Utility::new(UtilityKind::SentenceBleu, vocab());
            let h: Vec<_> = set.iter().enumerate().map(|(i, t)| hyp(t, i + 1)).collect();
            let r = mbr_rank(3, &[4], &h, &u).unwrap();
            prop_assert_eq!(r.len(), h.len());
            prop_assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
            let mut idx: Vec<_> = r.hypotheses.iter().map(|h| h.sample_index).collect();
            idx.sort_unstable();
            prop_assert_eq!(idx, (1..=h.len()).collect::<Vec<_>>());
        }
    }
}
