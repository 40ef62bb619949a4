//! Line-delimited JSON files for every intermediate artifact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decoding::Hypothesis;
use crate::dpo::MarginTrace;
use crate::error::{Error, Result};
use crate::mbr::{RankedHypothesisSet, UtilityKind};
use crate::model::TokenId;
use crate::tasks::{Example, TaskSpec};

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Describes a generated corpus: the spec it came from (which fixes the
/// task mapping and vocabulary) and one file per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: TaskSpec,
    pub vocab: Vec<String>,
    pub splits: Vec<SplitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub count: usize,
}

/// One corpus line.
pub type CorpusRecord = Example;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub source_id: usize,
    pub sample_index: usize,
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    #[serde(default)]
    pub truncated: bool,
}

impl HypothesisRecord {
    pub fn new(source_id: usize, h: &Hypothesis) -> Self {
        Self {
            source_id,
            sample_index: h.sample_index,
            tokens: h.tokens.clone(),
            log_prob: h.log_prob,
            truncated: h.truncated,
        }
    }

    pub fn hypothesis(&self) -> Hypothesis {
        Hypothesis {
            tokens: self.tokens.clone(),
            log_prob: self.log_prob,
            sample_index: self.sample_index,
            truncated: self.truncated,
        }
    }
}

/// Flattens per-source hypothesis sets.
pub fn hypothesis_records(sets: &[(usize, Vec<Hypothesis>)]) -> Vec<HypothesisRecord> {
    sets.iter()
        .flat_map(|(id, hs)| hs.iter().map(move |h| HypothesisRecord::new(*id, h)))
        .collect()
}

/// Regroups records by source id, keeping file order within each group.
pub fn group_hypotheses(records: &[HypothesisRecord]) -> BTreeMap<usize, Vec<Hypothesis>> {
    let mut out: BTreeMap<usize, Vec<Hypothesis>> = BTreeMap::new();
    for r in records {
        out.entry(r.source_id).or_default().push(r.hypothesis());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRecord {
    pub source_id: usize,
    pub rank: usize,
    pub sample_index: usize,
    pub score: f64,
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    #[serde(default)]
    pub truncated: bool,
    pub utility: UtilityKind,
}

pub fn ranked_records(sets: &[RankedHypothesisSet]) -> Vec<RankedRecord> {
    sets.iter()
        .flat_map(|s| {
            s.hypotheses.iter().zip(&s.scores).enumerate().map(move |(k, (h, &score))| RankedRecord {
                source_id: s.source_id,
                rank: k + 1,
                sample_index: h.sample_index,
                score,
                tokens: h.tokens.clone(),
                log_prob: h.log_prob,
                truncated: h.truncated,
                utility: s.utility,
            })
        })
        .collect()
}

/// Rebuilds ranked sets; `source_of` supplies source tokens by id.
pub fn ranked_sets(records: &[RankedRecord], source_of: impl Fn(usize) -> Option<Vec<TokenId>>) -> Result<Vec<RankedHypothesisSet>> {
    let mut out: Vec<RankedHypothesisSet> = Vec::new();
    for r in records {
        let start_new = out.last().is_none_or(|s| s.source_id != r.source_id);
        if start_new {
            if r.rank != 1 {
                return Err(Error::InvalidConfig(format!(
                    "ranked list for source {} does not start at rank 1",
                    r.source_id
                )));
            }
            let source = source_of(r.source_id)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown source id {}", r.source_id)))?;
            out.push(RankedHypothesisSet {
                source_id: r.source_id,
                source,
                hypotheses: Vec::new(),
                scores: Vec::new(),
                utility: r.utility,
            });
        }
        let set = out.last_mut().expect("pushed above");
        if r.rank != set.len() + 1 {
            return Err(Error::InvalidConfig(format!(
                "ranked list for source {} skips from rank {} to {}",
                r.source_id,
                set.len(),
                r.rank
            )));
        }
        set.hypotheses.push(Hypothesis {
            tokens: r.tokens.clone(),
            log_prob: r.log_prob,
            sample_index: r.sample_index,
            truncated: r.truncated,
        });
        set.scores.push(r.score);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub step: usize,
    pub raw: f64,
    pub moving_average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutRecord {
    pub fraction: f64,
    pub step: usize,
    pub pair_id: usize,
    pub margin: f64,
}

pub fn margin_records(trace: &MarginTrace) -> Vec<MarginRecord> {
    trace
        .raw
        .iter()
        .zip(&trace.moving_average)
        .enumerate()
        .map(|(step, (&raw, &moving_average))| MarginRecord {
            step,
            raw,
            moving_average,
        })
        .collect()
}

pub fn heldout_records(trace: &MarginTrace) -> Vec<HeldoutRecord> {
    trace
        .heldout
        .iter()
        .flat_map(|h| {
            h.margins.iter().enumerate().map(move |(pair_id, &margin)| HeldoutRecord {
                fraction: h.fraction,
                step: h.step,
                pair_id,
                margin,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpo::HeldoutMargins;
    use crate::preference::{PreferenceTriplet, Strategy};

    fn hyp(tokens: &[TokenId], idx: usize) -> Hypothesis {
        Hypothesis {
            tokens: tokens.to_vec(),
            log_prob: -1.5 * idx as f64,
            sample_index: idx,
            truncated: idx == 2,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/t.jsonl");
        let items = vec![
            PreferenceTriplet {
                source_id: 3,
                source: vec![4, 5],
                winner: vec![6],
                loser: vec![],
                winner_rank: 1,
                loser_rank: 4,
                winner_score: 0.1 + 0.2,
                loser_score: 1e-300,
                strategy: Strategy::ConsecutivePairsStride(3),
            };
            2
        ];
        write_jsonl(&path, &items).unwrap();
        let back: Vec<PreferenceTriplet> = read_jsonl(&path).unwrap();
        assert_eq!(back, items);
    }

    #[test]
    fn bad_lines_report_their_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        fs::write(&path, "{\"source_id\":0,\"sample_index\":1,\"tokens\":[],\"log_prob\":-1.0}\nnot json\n").unwrap();
        match read_jsonl::<HypothesisRecord>(&path) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(read_jsonl::<HypothesisRecord>(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn hypotheses_regroup_by_source() {
        let sets = vec![(5, vec![hyp(&[4], 1), hyp(&[5], 2)]), (2, vec![hyp(&[6, 6], 1)])];
        let recs = hypothesis_records(&sets);
        assert_eq!(recs.len(), 3);
        let grouped = group_hypotheses(&recs);
        assert_eq!(grouped[&5], sets[0].1);
        assert_eq!(grouped[&2], sets[1].1);
    }

    #[test]
    fn ranked_sets_round_trip() {
        let sets = vec![
            RankedHypothesisSet {
                source_id: 1,
                source: vec![4, 4],
                hypotheses: vec![hyp(&[5], 2), hyp(&[6], 1)],
                scores: vec![0.75, 0.25],
                utility: UtilityKind::Chrf,
            },
            RankedHypothesisSet {
                source_id: 0,
                source: vec![7],
                hypotheses: vec![hyp(&[7], 1)],
                scores: vec![1.0],
                utility: UtilityKind::Chrf,
            },
        ];
        let recs = ranked_records(&sets);
        assert_eq!(recs.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2, 1]);
        let back = ranked_sets(&recs, |id| Some(if id == 1 { vec![4, 4] } else { vec![7] })).unwrap();
        assert_eq!(back, sets);
        assert!(ranked_sets(&recs[1..], |_| Some(vec![])).is_err());
        assert!(ranked_sets(&recs, |_| None).is_err());
    }

    #[test]
    fn margin_trace_flattens() {
        let trace = MarginTrace {
            raw: vec![0.0, 1.0],
            moving_average: vec![0.0, 0.5],
            heldout: vec![
                HeldoutMargins { fraction: 0.0, step: 0, margins: vec![0.0, 0.0] },
                HeldoutMargins { fraction: 1.0, step: 2, margins: vec![0.5, -0.1] },
            ],
        };
        let m = margin_records(&trace);
        assert_eq!(m[1], MarginRecord { step: 1, raw: 1.0, moving_average: 0.5 });
        let h = heldout_records(&trace);
        assert_eq!(h.len(), 4);
        assert_eq!(h[3], HeldoutRecord { fraction: 1.0, step: 2, pair_id: 1, margin: -0.1 });
    }
}
