//! Deterministic synthetic translation tasks with exact references.
//!
//! * `cipher`: every source symbol maps through a fixed permutation.
//! * `reverse`: the target is the source read backwards.
//! * `lexicon`: word-for-word dictionary into a disjoint target alphabet,
//!   after which every (modifier, head) source pair is emitted head first.
//!
//! Source and target symbols are single characters so that character-level
//! utilities see one character per token.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::derive_seed;
use crate::error::{Error, Result};
use crate::mbr::Utility;
use crate::model::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Cipher,
    Reverse,
    Lexicon,
}

/// How a corrupted base-training target token is damaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Replaced by a different target symbol.
    Substitute,
    /// Dropped.
    Delete,
    /// The target is cut off before this token.
    Truncate,
    /// Substituted or dropped with equal probability.
    Mixed,
    /// Substituted, dropped or cut off with equal probability.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub base_train: usize,
    pub dpo_finetune: usize,
    pub heldout: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            base_train: 2000,
            dpo_finetune: 500,
            heldout: 200,
            test: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of source symbols (targets use the same count).
    pub alphabet_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Per-token corruption probability for base-training targets.
    pub noise_rate: f64,
    pub noise_kind: NoiseKind,
    pub splits: SplitSizes,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Cipher,
            alphabet_size: 16,
            min_len: 4,
            max_len: 12,
            noise_rate: 0.1,
            noise_kind: NoiseKind::Truncate,
            splits: SplitSizes::default(),
            seed: 0,
        }
    }
}

const LOWER: &str = "abcdefghijklmnopqrstuvwxyz";
const UPPER: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.alphabet_size < 2 {
            return bad("alphabet needs at least two symbols".into());
        }
        if self.alphabet_size > LOWER.len() {
            return bad(format!(
                "alphabet of {} symbols exceeds the {} available",
                self.alphabet_size,
                LOWER.len()
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("sentence lengths must satisfy 1 <= min_len <= max_len".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad("noise_rate must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// A source/target pair of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// A corpus line: pair plus a corpus-wide unique id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Example {
    pub fn pair(&self) -> SentencePair {
        SentencePair {
            source: self.source.clone(),
            target: self.target.clone(),
        }
    }
}

/// The mapping from source to target sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    kind: TaskKind,
    vocab: Vocab,
    source_ids: Vec<TokenId>,
    /// `mapping[i]` is the target id for `source_ids[i]`.
    mapping: Vec<TokenId>,
}

impl Task {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x7A5C));
        let k = spec.alphabet_size;
        let mut perm: Vec<usize> = (0..k).collect();
        match spec.kind {
            TaskKind::Cipher | TaskKind::Lexicon => perm.shuffle(&mut rng),
            TaskKind::Reverse => {}
        }
        Self::with_permutation(spec.kind, k, &perm)
    }

    /// Builds a task whose symbol map sends source symbol `i` to target
    /// symbol `perm[i]`.
    pub fn with_permutation(kind: TaskKind, alphabet_size: usize, perm: &[usize]) -> Result<Self> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if perm.len() != alphabet_size || sorted.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::InvalidConfig("symbol map must be a permutation".into()));
        }
        if alphabet_size > LOWER.len() {
            return Err(Error::InvalidConfig("alphabet too large".into()));
        }
        let source: Vec<String> = LOWER.chars().take(alphabet_size).map(String::from).collect();
        let mut symbols = source.clone();
        if kind == TaskKind::Lexicon {
            symbols.extend(UPPER.chars().take(alphabet_size).map(String::from));
        }
        let vocab = Vocab::new(symbols)?;
        let source_ids: Vec<TokenId> = source.iter().map(|s| vocab.id(s).expect("present")).collect();
        let target_base = if kind == TaskKind::Lexicon {
            source_ids[0] + alphabet_size as TokenId
        } else {
            source_ids[0]
        };
        let mapping = perm.iter().map(|&p| target_base + p as TokenId).collect();
        Ok(Self {
            kind,
            vocab,
            source_ids,
            mapping,
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn source_ids(&self) -> &[TokenId] {
        &self.source_ids
    }

    /// Ids that can appear in targets.
    pub fn target_ids(&self) -> Vec<TokenId> {
        let mut ids = self.mapping.clone();
        ids.sort_unstable();
        ids
    }

    fn source_rank(&self, id: TokenId) -> Result<usize> {
        self.source_ids
            .iter()
            .position(|&s| s == id)
            .ok_or_else(|| Error::InvalidConfig(format!("token {id} is not a source symbol")))
    }

    fn map_symbol(&self, id: TokenId) -> Result<TokenId> {
        Ok(self.mapping[self.source_rank(id)?])
    }

    /// The exact reference translation of `source`.
    pub fn translate(&self, source: &[TokenId]) -> Result<Vec<TokenId>> {
        match self.kind {
            TaskKind::Cipher => source.iter().map(|&t| self.map_symbol(t)).collect(),
            TaskKind::Reverse => {
                for &t in source {
                    self.source_rank(t)?;
                }
                Ok(source.iter().rev().copied().collect())
            }
            TaskKind::Lexicon => {
                let half = self.source_ids.len() / 2;
                let mut out = Vec::with_capacity(source.len());
                let mut i = 0;
                while i < source.len() {
                    let r = self.source_rank(source[i])?;
                    let next = source.get(i + 1).map(|&t| self.source_rank(t)).transpose()?;
                    match next {
                        Some(n) if r < half && n >= half => {
                            out.push(self.mapping[n]);
                            out.push(self.mapping[r]);
                            i += 2;
                        }
                        _ => {
                            out.push(self.mapping[r]);
                            i += 1;
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

/// All splits of a generated corpus.
///
/// `dpo_finetune` keeps its references so evaluation code can use them; the
/// preference pipeline only ever reads the sources.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub task: Task,
    pub base_train: Vec<Example>,
    pub dpo_finetune: Vec<Example>,
    pub heldout: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpus {
    pub fn vocab(&self) -> &Vocab {
        self.task.vocab()
    }

    pub fn splits(&self) -> [(&'static str, &[Example]); 4] {
        [
            ("base_train", &self.base_train),
            ("dpo_finetune", &self.dpo_finetune),
            ("heldout", &self.heldout),
            ("test", &self.test),
        ]
    }
}

/// Generates every split. Sources are distinct across the whole corpus;
/// only `base_train` targets are corrupted.
pub fn gen_corpus(spec: &TaskSpec) -> Result<Corpus> {
    let task = Task::new(spec)?;
    let sizes = &spec.splits;
    let total = sizes.base_train + sizes.dpo_finetune + sizes.heldout + sizes.test;
    let capacity: f64 = (spec.min_len..=spec.max_len)
        .map(|l| (spec.alphabet_size as f64).powi(l as i32))
        .sum();
    if (total as f64) > capacity / 2.0 {
        return Err(Error::InvalidConfig(format!(
            "{total} distinct sentences requested but only {capacity} exist"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0xC0DE));
    let mut seen = HashSet::with_capacity(total);
    let mut sources = Vec::with_capacity(total);
    while sources.len() < total {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let s: Vec<TokenId> = (0..len)
            .map(|_| task.source_ids[rng.gen_range(0..spec.alphabet_size)])
            .collect();
        if seen.insert(s.clone()) {
            sources.push(s);
        }
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x0015E));
    let targets = task.target_ids();
    let mut examples = sources.into_iter().enumerate().map(|(id, source)| {
        let target = task.translate(&source).expect("generated from source alphabet");
        Example { id, source, target }
    });
    let mut take = |n: usize| -> Vec<Example> { examples.by_ref().take(n).collect() };
    let mut base_train = take(sizes.base_train);
    let dpo_finetune = take(sizes.dpo_finetune);
    let heldout = take(sizes.heldout);
    let test = take(sizes.test);

    for ex in &mut base_train {
        ex.target = corrupt(&ex.target, &targets, spec.noise_rate, spec.noise_kind, &mut noise_rng);
    }
    Ok(Corpus {
        task,
        base_train,
        dpo_finetune,
        heldout,
        test,
    })
}

/// Damages each token with probability `rate`. Substitutes are drawn
/// uniformly from the other target symbols.
fn corrupt(target: &[TokenId], alphabet: &[TokenId], rate: f64, kind: NoiseKind, rng: &mut impl Rng) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(target.len());
    for &t in target {
        if rng.gen::<f64>() >= rate {
            out.push(t);
            continue;
        }
        let kind = match kind {
            NoiseKind::Mixed => [NoiseKind::Substitute, NoiseKind::Delete][rng.gen_range(0..2)],
            NoiseKind::All => [NoiseKind::Substitute, NoiseKind::Delete, NoiseKind::Truncate][rng.gen_range(0..3)],
            k => k,
        };
        match kind {
            NoiseKind::Substitute => {
                let others: Vec<TokenId> = alphabet.iter().copied().filter(|&a| a != t).collect();
                out.push(others[rng.gen_range(0..others.len())]);
            }
            NoiseKind::Truncate => break,
            _ => {}
        }
    }
    out
}

/// Aggregate quality of a system output against references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub mean_utility: f64,
    pub exact_match: f64,
}

/// Mean sentence-level utility and exact-match rate.
pub fn corpus_metrics(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>], metric: &Utility) -> Result<CorpusScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            what: "hypotheses vs references",
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    if references.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let n = references.len() as f64;
    let total: f64 = hypotheses.iter().zip(references).map(|(h, r)| metric.score(h, r)).sum();
    let exact = hypotheses.iter().zip(references).filter(|(h, r)| h == r).count();
    Ok(CorpusScore {
        mean_utility: total / n,
        exact_match: exact as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mbr::UtilityKind;

    fn small_spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            splits: SplitSizes {
                base_train: 300,
                dpo_finetune: 50,
                heldout: 40,
                test: 60,
            },
            seed: 17,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn identity_cipher_copies_source() {
        let task = Task::with_permutation(TaskKind::Cipher, 8, &(0..8).collect::<Vec<_>>()).unwrap();
        let s = vec![4, 9, 11, 4];
        assert_eq!(task.translate(&s).unwrap(), s);
    }

    #[test]
    fn reverse_is_an_involution() {
        let task = Task::new(&small_spec(TaskKind::Reverse)).unwrap();
        let s = vec![4, 5, 9, 12, 6];
        let once = task.translate(&s).unwrap();
        assert_eq!(once, vec![6, 12, 9, 5, 4]);
        assert_eq!(task.translate(&once).unwrap(), s);
    }

    #[test]
    fn cipher_is_a_bijection_on_symbols() {
        let task = Task::new(&small_spec(TaskKind::Cipher)).unwrap();
        let mapped: HashSet<_> = task.source_ids().iter().map(|&s| task.map_symbol(s).unwrap()).collect();
        assert_eq!(mapped.len(), task.source_ids().len());
    }

    #[test]
    fn lexicon_reorders_modifier_head_pairs() {
        let task = Task::with_permutation(TaskKind::Lexicon, 4, &[0, 1, 2, 3]).unwrap();
        // Source ids 4..8 ("a".."d"); "a","b" are modifiers, "c","d" heads.
        // Targets are 8..12 ("A".."D").
        assert_eq!(task.translate(&[4, 6]).unwrap(), vec![10, 8]);
        assert_eq!(task.translate(&[6, 4]).unwrap(), vec![10, 8]);
        assert_eq!(task.translate(&[4, 5, 7, 6]).unwrap(), vec![8, 11, 9, 10]);
        assert!(task.translate(&[8]).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        for kind in [TaskKind::Cipher, TaskKind::Reverse, TaskKind::Lexicon] {
            let spec = small_spec(kind);
            let c = gen_corpus(&spec).unwrap();
            let sets: Vec<HashSet<Vec<TokenId>>> = c
                .splits()
                .iter()
                .map(|(_, xs)| xs.iter().map(|e| e.source.clone()).collect())
                .collect();
            let expected = [300, 50, 40, 60];
            for (s, n) in sets.iter().zip(expected) {
                assert_eq!(s.len(), n);
            }
            for i in 0..4 {
                for j in (i + 1)..4 {
                    assert!(sets[i].is_disjoint(&sets[j]));
                }
            }
            for ex in c.dpo_finetune.iter().chain(&c.heldout).chain(&c.test) {
                assert_eq!(c.task.translate(&ex.source).unwrap(), ex.target);
                assert!((4..=12).contains(&ex.source.len()));
            }
        }
    }

    #[test]
    fn noise_touches_only_base_train_at_roughly_the_set_rate() {
        let spec = TaskSpec {
            noise_kind: NoiseKind::Substitute,
            ..small_spec(TaskKind::Cipher)
        };
        let c = gen_corpus(&spec).unwrap();
        let (mut wrong, mut total) = (0, 0);
        for ex in &c.base_train {
            let clean = c.task.translate(&ex.source).unwrap();
            assert_eq!(clean.len(), ex.target.len());
            wrong += clean.iter().zip(&ex.target).filter(|(a, b)| a != b).count();
            total += clean.len();
        }
        let rate = wrong as f64 / total as f64;
        assert!((0.07..0.13).contains(&rate), "{rate}");
    }

    #[test]
    fn deletion_noise_shortens_targets_at_the_set_rate() {
        for (kind, expected) in [(NoiseKind::Delete, 0.1), (NoiseKind::Mixed, 0.05)] {
            let spec = TaskSpec {
                noise_kind: kind,
                ..small_spec(TaskKind::Cipher)
            };
            let c = gen_corpus(&spec).unwrap();
            let (mut dropped, mut total) = (0, 0);
            for ex in &c.base_train {
                let clean = c.task.translate(&ex.source).unwrap();
                assert!(ex.target.len() <= clean.len());
                dropped += clean.len() - ex.target.len();
                total += clean.len();
            }
            let rate = dropped as f64 / total as f64;
            assert!((rate - expected).abs() < 0.3 * expected, "{kind:?} {rate}");
            for ex in c.dpo_finetune.iter().chain(&c.test) {
                assert_eq!(c.task.translate(&ex.source).unwrap(), ex.target);
            }
        }
    }

    #[test]
    fn deleted_tokens_keep_the_rest_in_order() {
        let alphabet: Vec<TokenId> = (4..8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean = vec![4, 5, 6, 7, 4, 5];
        for _ in 0..200 {
            let out = corrupt(&clean, &alphabet, 0.3, NoiseKind::Delete, &mut rng);
            let mut it = clean.iter();
            assert!(out.iter().all(|t| it.any(|c| c == t)));
        }
        assert_eq!(corrupt(&clean, &alphabet, 0.0, NoiseKind::Mixed, &mut rng), clean);
        assert!(corrupt(&clean, &alphabet, 1.0, NoiseKind::Delete, &mut rng).is_empty());
    }

    #[test]
    fn truncated_targets_are_prefixes_of_the_clean_target() {
        let c = gen_corpus(&small_spec(TaskKind::Cipher)).unwrap();
        assert_eq!(TaskSpec::default().noise_kind, NoiseKind::Truncate);
        let mut cut = 0;
        for ex in &c.base_train {
            let clean = c.task.translate(&ex.source).unwrap();
            assert!(clean.starts_with(&ex.target));
            cut += usize::from(ex.target.len() < clean.len());
        }
        assert!(cut > 0 && cut < c.base_train.len(), "{cut}");
        let alphabet: Vec<TokenId> = (4..8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(corrupt(&[4, 5, 6], &alphabet, 1.0, NoiseKind::Truncate, &mut rng).is_empty());
    }

    #[test]
    fn corruption_never_keeps_the_correct_symbol() {
        let alphabet: Vec<TokenId> = (4..8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            let t = corrupt(&[5], &alphabet, 1.0, NoiseKind::Substitute, &mut rng);
            assert_ne!(t[0], 5);
            counts[(t[0] - 4) as usize] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            if i != 1 {
                assert!((1100..1570).contains(&c), "{counts:?}");
            }
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let spec = small_spec(TaskKind::Lexicon);
        assert_eq!(gen_corpus(&spec).unwrap(), gen_corpus(&spec).unwrap());
    }

    #[test]
    fn oversized_requests_fail() {
        let spec = TaskSpec {
            alphabet_size: 2,
            min_len: 1,
            max_len: 2,
            ..small_spec(TaskKind::Cipher)
        };
        assert!(gen_corpus(&spec).is_err());
        assert!(Task::with_permutation(TaskKind::Cipher, 3, &[0, 0, 1]).is_err());
        assert!(Task::new(&TaskSpec {
            alphabet_size: 27,
            ..TaskSpec::default()
        })
        .is_err());
    }

    #[test]
    fn corpus_metrics_cases() {
        let task = Task::new(&small_spec(TaskKind::Cipher)).unwrap();
        let chrf = Utility::new(UtilityKind::Chrf, task.vocab().clone());
        let refs = vec![vec![4, 5, 6, 7], vec![8, 9, 10], vec![11, 12, 13, 14]];
        let perfect = corpus_metrics(&refs, &refs, &chrf).unwrap();
        assert_eq!(perfect.mean_utility, 1.0);
        assert_eq!(perfect.exact_match, 1.0);

        let empty = vec![Vec::new(); 3];
        assert_eq!(corpus_metrics(&empty, &refs, &chrf).unwrap().mean_utility, 0.0);

        let mixed = vec![vec![4, 5, 6, 7], vec![8, 9], vec![15, 12, 13]];
        let got = corpus_metrics(&mixed, &refs, &chrf).unwrap();
        let oracle: f64 = mixed.iter().zip(&refs).map(|(h, r)| chrf.score(h, r)).sum::<f64>() / 3.0;
        assert!((got.mean_utility - oracle).abs() < 1e-12);
        assert!((got.exact_match - 1.0 / 3.0).abs() < 1e-15);
        assert!(corpus_metrics(&mixed[..2], &refs, &chrf).is_err());
    }
}
