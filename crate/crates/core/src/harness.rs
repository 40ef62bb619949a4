//! End-to-end experiment orchestration over on-disk artifacts.
//!
//! Each stage reads its inputs from files written by earlier stages, so any
//! stage can be rerun on its own. A stage leaves a `<stage>.done` marker
//! holding the configuration it ran with; a resumed pipeline skips a stage
//! only when that marker matches the current configuration.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{beam_search, sample_hypothesis_set, Hypothesis, SamplingConfig};
use crate::dpo::{dpo_finetune, median, DpoConfig, MarginTrace};
use crate::error::{Error, Result};
use crate::mbr::{mbr_rank, RankedHypothesisSet, Utility, UtilityKind};
use crate::model::{init_model, load_checkpoint, save_checkpoint, train_mle, MleConfig, ModelConfig, ModelParams, TokenId, Vocab};
use crate::preference::{build_dataset, PreferenceTriplet, Strategy};
use crate::records::{
    group_hypotheses, heldout_records, hypothesis_records, margin_records, ranked_records, ranked_sets, read_json,
    read_jsonl, write_json, write_jsonl, HeldoutRecord, HypothesisRecord, MarginRecord, RankedRecord, SplitEntry,
    SplitManifest,
};
use crate::tasks::{corpus_metrics, gen_corpus, Corpus, Example, Task, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreferenceConfig {
    pub strategy: Strategy,
    /// Drop pairs whose winner and loser are the same sequence.
    pub drop_identical: bool,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::BestMiddleWorst,
            drop_identical: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 4,
            max_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub utility: UtilityKind,
    pub model_seed: u64,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub base: MleConfig,
    pub sampling: SamplingConfig,
    pub preference: PreferenceConfig,
    pub dpo: DpoConfig,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            utility: UtilityKind::Chrf,
            model_seed: 0,
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            base: MleConfig::default(),
            sampling: SamplingConfig::default(),
            preference: PreferenceConfig::default(),
            dpo: DpoConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Sets every stage seed from one base seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.task.seed = seed;
        self.model_seed = seed;
        self.base.seed = seed;
        self.sampling.seed = seed;
        self.dpo.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.sampling.validate()?;
        self.dpo.validate()?;
        if self.decode.beam_width == 0 {
            return Err(Error::InvalidConfig("beam width must be at least 1".into()));
        }
        self.model.validate(Task::new(&self.task)?.vocab().len())
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts::new(&self.out_dir)
    }
}

/// Where each stage reads and writes. Sweeps point several runs at shared
/// directories for the stages they have in common.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub data: PathBuf,
    pub base: PathBuf,
    pub samples: PathBuf,
    pub prefs: PathBuf,
    pub dpo: PathBuf,
    pub eval: PathBuf,
}

pub const SPLITS: [&str; 4] = ["base_train", "dpo_finetune", "heldout", "test"];
/// Splits that get hypothesis sets.
pub const SAMPLED_SPLITS: [&str; 3] = ["dpo_finetune", "heldout", "test"];

impl Artifacts {
    pub fn new(root: &Path) -> Self {
        Self {
            data: root.join("data"),
            base: root.join("base"),
            samples: root.join("samples"),
            prefs: root.join("prefs"),
            dpo: root.join("dpo"),
            eval: root.join("eval"),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.data.join("manifest.json")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.data.join(format!("{name}.jsonl"))
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.base.join("model.ckpt")
    }

    pub fn base_log(&self) -> PathBuf {
        self.base.join("train_log.jsonl")
    }

    pub fn base_beam(&self) -> PathBuf {
        self.base.join("test_beam.jsonl")
    }

    pub fn hypotheses(&self, split: &str) -> PathBuf {
        self.samples.join(format!("{split}.hyps.jsonl"))
    }

    pub fn ranked(&self, split: &str) -> PathBuf {
        self.samples.join(format!("{split}.ranked.jsonl"))
    }

    pub fn base_mbr(&self) -> PathBuf {
        self.samples.join("test_mbr.jsonl")
    }

    pub fn triplets(&self) -> PathBuf {
        self.prefs.join("triplets.jsonl")
    }

    pub fn heldout_triplets(&self) -> PathBuf {
        self.prefs.join("heldout_bmw.jsonl")
    }

    pub fn dpo_checkpoint(&self) -> PathBuf {
        self.dpo.join("model.ckpt")
    }

    pub fn margins(&self) -> PathBuf {
        self.dpo.join("margins.jsonl")
    }

    pub fn heldout_margins(&self) -> PathBuf {
        self.dpo.join("heldout_margins.jsonl")
    }

    pub fn dpo_beam(&self) -> PathBuf {
        self.dpo.join("test_beam.jsonl")
    }

    pub fn report_json(&self) -> PathBuf {
        self.eval.join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.eval.join("report.txt")
    }
}

fn marker(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{stage}.done"))
}

fn stage_key<T: Serialize>(inputs: &T) -> Result<String> {
    Ok(serde_json::to_string(inputs)?)
}

fn is_done(dir: &Path, stage: &str, key: &str) -> bool {
    fs::read_to_string(marker(dir, stage)).is_ok_and(|k| k == key)
}

fn mark_done(dir: &Path, stage: &str, key: &str) -> Result<()> {
    let path = marker(dir, stage);
    fs::write(&path, key).map_err(|e| Error::io(path, e))
}

/// Runs `body` unless `dir` already holds a matching marker, tagging any
/// failure with the stage name.
fn run_stage(stage: &'static str, dir: &Path, key: &str, resume: bool, body: impl FnOnce() -> Result<()>) -> Result<()> {
    if resume && is_done(dir, stage, key) {
        return Ok(());
    }
    let tag = |e| Error::Stage {
        stage,
        source: Box::new(e),
    };
    fs::create_dir_all(dir).map_err(|e| tag(Error::io(dir, e)))?;
    let _ = fs::remove_file(marker(dir, stage));
    body().map_err(tag)?;
    mark_done(dir, stage, key).map_err(tag)
}

// ---------------------------------------------------------------- stages

pub fn gen_data(spec: &TaskSpec, art: &Artifacts) -> Result<Corpus> {
    let corpus = gen_corpus(spec)?;
    let mut splits = Vec::new();
    for (name, examples) in corpus.splits() {
        write_jsonl(&art.split(name), examples)?;
        splits.push(SplitEntry {
            name: name.to_string(),
            file: format!("{name}.jsonl"),
            count: examples.len(),
        });
    }
    write_json(
        &art.manifest(),
        &SplitManifest {
            spec: spec.clone(),
            vocab: corpus.vocab().symbols().to_vec(),
            splits,
        },
    )?;
    Ok(corpus)
}

pub fn load_corpus(art: &Artifacts) -> Result<Corpus> {
    let manifest: SplitManifest = read_json(&art.manifest())?;
    let task = Task::new(&manifest.spec)?;
    if task.vocab().symbols() != manifest.vocab.as_slice() {
        return Err(Error::InvalidConfig("manifest vocabulary does not match its task spec".into()));
    }
    let mut by_name: HashMap<String, Vec<Example>> = HashMap::new();
    for entry in &manifest.splits {
        let examples: Vec<Example> = read_jsonl(&art.data.join(&entry.file))?;
        if examples.len() != entry.count {
            return Err(Error::LengthMismatch {
                what: "split file vs manifest count",
                left: examples.len(),
                right: entry.count,
            });
        }
        task.vocab().check(examples.iter().flat_map(|e| e.source.iter().chain(&e.target)).copied().collect::<Vec<_>>().as_slice())?;
        by_name.insert(entry.name.clone(), examples);
    }
    let mut take = |name: &str| {
        by_name
            .remove(name)
            .ok_or_else(|| Error::InvalidConfig(format!("manifest lacks split {name}")))
    };
    Ok(Corpus {
        base_train: take("base_train")?,
        dpo_finetune: take("dpo_finetune")?,
        heldout: take("heldout")?,
        test: take("test")?,
        task,
    })
}

fn split_of<'a>(corpus: &'a Corpus, name: &str) -> &'a [Example] {
    match name {
        "base_train" => &corpus.base_train,
        "dpo_finetune" => &corpus.dpo_finetune,
        "heldout" => &corpus.heldout,
        _ => &corpus.test,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpochRecord {
    epoch: usize,
    nll: f64,
}

pub fn train_base(cfg: &ExperimentConfig, art: &Artifacts) -> Result<ModelParams> {
    let corpus = load_corpus(art)?;
    let init = init_model(&cfg.model, corpus.vocab(), cfg.model_seed)?;
    let pairs: Vec<_> = corpus.base_train.iter().map(Example::pair).collect();
    let (params, report) = train_mle(&init, &pairs, &cfg.base)?;
    save_checkpoint(&params, &art.base_checkpoint())?;
    write_jsonl(
        &art.base_log(),
        report.epoch_nll.iter().enumerate().map(|(epoch, &nll)| EpochRecord { epoch, nll }),
    )?;
    Ok(params)
}

/// Hypothesis sets for every sampled split; each source gets its own
/// sub-seed derived from the sampling seed and the source id.
pub fn sample(sampling: &SamplingConfig, art: &Artifacts) -> Result<()> {
    let corpus = load_corpus(art)?;
    let params = load_checkpoint(&art.base_checkpoint())?;
    for split in SAMPLED_SPLITS {
        let sets = sample_split(&params, split_of(&corpus, split), sampling)?;
        write_jsonl(&art.hypotheses(split), hypothesis_records(&sets))?;
    }
    Ok(())
}

pub fn sample_split(params: &ModelParams, examples: &[Example], sampling: &SamplingConfig) -> Result<Vec<(usize, Vec<Hypothesis>)>> {
    examples
        .par_iter()
        .map(|ex| {
            let cfg = SamplingConfig {
                seed: crate::decoding::derive_seed(sampling.seed, ex.id as u64),
                ..sampling.clone()
            };
            Ok((ex.id, sample_hypothesis_set(params, &ex.source, &cfg)?))
        })
        .collect()
}

pub fn rank(utility: UtilityKind, art: &Artifacts) -> Result<()> {
    let corpus = load_corpus(art)?;
    let util = Utility::new(utility, corpus.vocab().clone());
    for split in SAMPLED_SPLITS {
        let records: Vec<HypothesisRecord> = read_jsonl(&art.hypotheses(split))?;
        let ranked = rank_split(split_of(&corpus, split), &records, &util)?;
        write_jsonl(&art.ranked(split), ranked_records(&ranked))?;
    }
    Ok(())
}

fn rank_split(examples: &[Example], records: &[HypothesisRecord], util: &Utility) -> Result<Vec<RankedHypothesisSet>> {
    let grouped = group_hypotheses(records);
    examples
        .par_iter()
        .map(|ex| {
            let hyps = grouped
                .get(&ex.id)
                .ok_or_else(|| Error::InvalidConfig(format!("no hypotheses for source {}", ex.id)))?;
            mbr_rank(ex.id, &ex.source, hyps, util)
        })
        .collect()
}

fn load_ranked(art: &Artifacts, corpus: &Corpus, split: &str) -> Result<Vec<RankedHypothesisSet>> {
    let sources: BTreeMap<usize, &Vec<TokenId>> = split_of(corpus, split).iter().map(|e| (e.id, &e.source)).collect();
    let records: Vec<RankedRecord> = read_jsonl(&art.ranked(split))?;
    ranked_sets(&records, |id| sources.get(&id).map(|s| s.to_vec()))
}

/// Training triplets with the configured strategy plus held-out BMW pairs
/// for margin tracking.
pub fn make_prefs(pref: &PreferenceConfig, art: &Artifacts) -> Result<usize> {
    let corpus = load_corpus(art)?;
    let train = build_dataset(&load_ranked(art, &corpus, "dpo_finetune")?, pref.strategy, pref.drop_identical)?;
    let heldout = build_dataset(&load_ranked(art, &corpus, "heldout")?, Strategy::BestMiddleWorst, pref.drop_identical)?;
    write_jsonl(&art.triplets(), &train)?;
    write_jsonl(&art.heldout_triplets(), &heldout)?;
    Ok(train.len())
}

pub fn dpo_train(dpo: &DpoConfig, art: &Artifacts) -> Result<MarginTrace> {
    let base = load_checkpoint(&art.base_checkpoint())?;
    let train: Vec<PreferenceTriplet> = read_jsonl(&art.triplets())?;
    let heldout: Vec<PreferenceTriplet> = read_jsonl(&art.heldout_triplets())?;
    let held = (!heldout.is_empty()).then_some(heldout.as_slice());
    let (params, trace) = if train.is_empty() && dpo.epochs == 0 {
        (base.clone(), MarginTrace { raw: vec![], moving_average: vec![], heldout: vec![] })
    } else {
        dpo_finetune(&base, &train, dpo, held)?
    };
    save_checkpoint(&params, &art.dpo_checkpoint())?;
    write_jsonl(&art.margins(), margin_records(&trace))?;
    write_jsonl(&art.heldout_margins(), heldout_records(&trace))?;
    Ok(trace)
}

/// Beam-search outputs on the test split.
pub fn beam_outputs(params: &ModelParams, examples: &[Example], decode: &DecodeConfig) -> Result<Vec<(usize, Vec<Hypothesis>)>> {
    examples
        .par_iter()
        .map(|ex| Ok((ex.id, vec![beam_search(params, &ex.source, decode.beam_width, decode.max_len)?])))
        .collect()
}

pub fn decode_base(decode: &DecodeConfig, art: &Artifacts) -> Result<()> {
    let corpus = load_corpus(art)?;
    let params = load_checkpoint(&art.base_checkpoint())?;
    write_jsonl(&art.base_beam(), hypothesis_records(&beam_outputs(&params, &corpus.test, decode)?))
}

pub fn decode_mbr(art: &Artifacts) -> Result<()> {
    let corpus = load_corpus(art)?;
    let ranked = load_ranked(art, &corpus, "test")?;
    let best: Vec<(usize, Vec<Hypothesis>)> = ranked.iter().map(|r| (r.source_id, vec![r.at_rank(1).clone()])).collect();
    write_jsonl(&art.base_mbr(), hypothesis_records(&best))
}

pub fn decode_dpo(decode: &DecodeConfig, art: &Artifacts) -> Result<()> {
    let corpus = load_corpus(art)?;
    let params = load_checkpoint(&art.dpo_checkpoint())?;
    write_jsonl(&art.dpo_beam(), hypothesis_records(&beam_outputs(&params, &corpus.test, decode)?))
}

// --------------------------------------------------------------- reports

/// Fraction of outputs in which some token 4-gram occurs at least twice
/// (occurrences may overlap). An empty list has rate 0.
pub fn repetition_rate(outputs: &[Vec<TokenId>]) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let repetitive = outputs
        .iter()
        .filter(|toks| {
            let mut seen = std::collections::HashSet::new();
            toks.windows(4).any(|w| !seen.insert(w))
        })
        .count();
    repetitive as f64 / outputs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScore {
    pub system: String,
    pub chrf: f64,
    pub bleu: f64,
    pub exact_match: f64,
    pub repetition_rate: f64,
    pub mean_length: f64,
}

/// Scores outputs (one per test source, in test order) against references.
pub fn score_system(system: &str, outputs: &[Vec<TokenId>], test: &[Example], vocab: &Vocab) -> Result<SystemScore> {
    let refs: Vec<Vec<TokenId>> = test.iter().map(|e| e.target.clone()).collect();
    let chrf = corpus_metrics(outputs, &refs, &Utility::new(UtilityKind::Chrf, vocab.clone()))?;
    let bleu = corpus_metrics(outputs, &refs, &Utility::new(UtilityKind::SentenceBleu, vocab.clone()))?;
    Ok(SystemScore {
        system: system.to_string(),
        chrf: chrf.mean_utility,
        bleu: bleu.mean_utility,
        exact_match: chrf.exact_match,
        repetition_rate: repetition_rate(outputs),
        mean_length: outputs.iter().map(Vec::len).sum::<usize>() as f64 / outputs.len().max(1) as f64,
    })
}

fn read_outputs(path: &Path, test: &[Example]) -> Result<Vec<Vec<TokenId>>> {
    let records: Vec<HypothesisRecord> = read_jsonl(path)?;
    let by_id: HashMap<usize, Vec<TokenId>> = records.into_iter().map(|r| (r.source_id, r.tokens)).collect();
    test.iter()
        .map(|e| {
            by_id
                .get(&e.id)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("{} lacks an output for source {}", path.display(), e.id)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub triplets: usize,
    pub steps: usize,
    /// Mean moving-average margin over the first and final 10% of steps.
    pub margin_first_decile: Option<f64>,
    pub margin_last_decile: Option<f64>,
    pub heldout_medians: Vec<(f64, f64)>,
}

pub fn decile_means(series: &[f64]) -> Option<(f64, f64)> {
    if series.is_empty() {
        return None;
    }
    let k = series.len().div_ceil(10);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Some((mean(&series[..k]), mean(&series[series.len() - k..])))
}

fn training_summary(art: &Artifacts) -> Result<TrainingSummary> {
    let triplets: Vec<PreferenceTriplet> = read_jsonl(&art.triplets())?;
    let margins: Vec<MarginRecord> = read_jsonl(&art.margins())?;
    let heldout: Vec<HeldoutRecord> = read_jsonl(&art.heldout_margins())?;
    let ma: Vec<f64> = margins.iter().map(|m| m.moving_average).collect();
    let deciles = decile_means(&ma);
    let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
    for r in heldout {
        match groups.last_mut() {
            Some((f, ms)) if *f == r.fraction => ms.push(r.margin),
            _ => groups.push((r.fraction, vec![r.margin])),
        }
    }
    Ok(TrainingSummary {
        triplets: triplets.len(),
        steps: margins.len(),
        margin_first_decile: deciles.map(|d| d.0),
        margin_last_decile: deciles.map(|d| d.1),
        heldout_medians: groups
            .into_iter()
            .filter_map(|(f, ms)| median(&ms).map(|m| (f, m)))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<SystemScore>,
    pub training: TrainingSummary,
}

impl ExperimentReport {
    pub fn row(&self, system: &str) -> Option<&SystemScore> {
        self.rows.iter().find(|r| r.system == system)
    }

    pub fn to_table(&self) -> String {
        let mut out = score_table(&self.rows);
        let t = &self.training;
        let _ = writeln!(out, "\ntriplets {}  steps {}", t.triplets, t.steps);
        if let (Some(a), Some(b)) = (t.margin_first_decile, t.margin_last_decile) {
            let _ = writeln!(out, "moving-average margin  first 10% {a:.4}  final 10% {b:.4}");
        }
        for (f, m) in &t.heldout_medians {
            let _ = writeln!(out, "held-out median margin at {f:.2}: {m:.4}");
        }
        out
    }
}

fn score_table(rows: &[SystemScore]) -> String {
    let mut out = format!(
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "system", "chrF", "BLEU", "exact", "repeat", "length"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.2}",
            r.system, r.chrf, r.bleu, r.exact_match, r.repetition_rate, r.mean_length
        );
    }
    out
}

pub fn base_mbr_name(set_size: usize) -> String {
    format!("base-mbr@{set_size}")
}

pub fn evaluate(cfg: &ExperimentConfig, art: &Artifacts) -> Result<ExperimentReport> {
    let corpus = load_corpus(art)?;
    let vocab = corpus.vocab();
    let rows = vec![
        score_system("base-beam", &read_outputs(&art.base_beam(), &corpus.test)?, &corpus.test, vocab)?,
        score_system(&base_mbr_name(cfg.sampling.set_size), &read_outputs(&art.base_mbr(), &corpus.test)?, &corpus.test, vocab)?,
        score_system("dpo-beam", &read_outputs(&art.dpo_beam(), &corpus.test)?, &corpus.test, vocab)?,
    ];
    let report = ExperimentReport {
        rows,
        training: training_summary(art)?,
    };
    write_json(&art.report_json(), &report)?;
    let path = art.report_txt();
    fs::write(&path, report.to_table()).map_err(|e| Error::io(path, e))?;
    Ok(report)
}

// ------------------------------------------------------------- pipelines

/// Runs the stages shared by every run over one base model and one sample
/// set: data, base training, base beam outputs, sampling, ranking and the
/// base MBR outputs.
pub fn run_shared_stages(cfg: &ExperimentConfig, art: &Artifacts, resume: bool) -> Result<()> {
    cfg.validate()?;
    let data_key = stage_key(&cfg.task)?;
    run_stage("gen-data", &art.data, &data_key, resume, || gen_data(&cfg.task, art).map(drop))?;
    let base_key = stage_key(&(&data_key, &cfg.model, cfg.model_seed, &cfg.base))?;
    run_stage("train-base", &art.base, &base_key, resume, || train_base(cfg, art).map(drop))?;
    let beam_key = stage_key(&(&base_key, &cfg.decode))?;
    run_stage("decode-base", &art.base, &beam_key, resume, || decode_base(&cfg.decode, art))?;
    let sample_key = stage_key(&(&base_key, &cfg.sampling))?;
    run_stage("sample", &art.samples, &sample_key, resume, || sample(&cfg.sampling, art))?;
    let rank_key = stage_key(&(&sample_key, cfg.utility))?;
    run_stage("rank", &art.samples, &rank_key, resume, || rank(cfg.utility, art))?;
    run_stage("decode-mbr", &art.samples, &rank_key, resume, || decode_mbr(art))
}

fn prefs_key(cfg: &ExperimentConfig) -> Result<String> {
    stage_key(&(&cfg.task, &cfg.model, cfg.model_seed, &cfg.base, &cfg.sampling, cfg.utility, &cfg.preference))
}

/// Preference data, DPO training, DPO beam outputs and the report, on top
/// of [`run_shared_stages`].
pub fn run_dpo_stages(cfg: &ExperimentConfig, art: &Artifacts, resume: bool) -> Result<ExperimentReport> {
    let pkey = prefs_key(cfg)?;
    run_stage("make-prefs", &art.prefs, &pkey, resume, || make_prefs(&cfg.preference, art).map(drop))?;
    let dkey = stage_key(&(&pkey, &cfg.dpo))?;
    run_stage("dpo-train", &art.dpo, &dkey, resume, || dpo_train(&cfg.dpo, art).map(drop))?;
    let bkey = stage_key(&(&dkey, &cfg.decode))?;
    run_stage("decode-dpo", &art.dpo, &bkey, resume, || decode_dpo(&cfg.decode, art))?;
    let mut report = None;
    run_stage("evaluate", &art.eval, "", false, || {
        report = Some(evaluate(cfg, art)?);
        Ok(())
    })?;
    Ok(report.expect("evaluate ran"))
}

/// gen-data → train-base → sample → rank → make-prefs → dpo-train →
/// evaluate. With `resume`, stages whose markers match are skipped.
pub fn run_pipeline(cfg: &ExperimentConfig, resume: bool) -> Result<ExperimentReport> {
    let art = cfg.artifacts();
    run_shared_stages(cfg, &art, resume)?;
    run_dpo_stages(cfg, &art, resume)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    pub chrf: f64,
    pub bleu: f64,
    pub exact_match: f64,
    pub repetition_rate: f64,
    pub training: TrainingSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSweepReport {
    pub base_beam: SystemScore,
    pub base_mbr: SystemScore,
    pub rows: Vec<BetaRow>,
}

impl BetaSweepReport {
    pub fn to_table(&self) -> String {
        let mut out = score_table(&[self.base_beam.clone(), self.base_mbr.clone()]);
        let _ = writeln!(out, "\n{:<8} {:>8} {:>8} {:>8} {:>8}", "beta", "chrF", "BLEU", "exact", "repeat");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                r.beta, r.chrf, r.bleu, r.exact_match, r.repetition_rate
            );
        }
        out
    }
}

pub fn beta_dir(root: &Path, beta: f64) -> PathBuf {
    root.join(format!("beta-{beta}"))
}

/// One DPO run per β, all sharing the base model and preference data.
pub fn run_beta_sweep(cfg: &ExperimentConfig, betas: &[f64], resume: bool) -> Result<BetaSweepReport> {
    if betas.is_empty() {
        return Err(Error::Empty("beta list"));
    }
    let shared = cfg.artifacts();
    run_shared_stages(cfg, &shared, resume)?;
    let mut rows = Vec::with_capacity(betas.len());
    let mut reference = None;
    for &beta in betas {
        let dir = beta_dir(&cfg.out_dir, beta);
        let run = ExperimentConfig {
            dpo: DpoConfig { beta, ..cfg.dpo.clone() },
            ..cfg.clone()
        };
        run.validate()?;
        let art = Artifacts {
            dpo: dir.join("dpo"),
            eval: dir.join("eval"),
            ..shared.clone()
        };
        let report = run_dpo_stages(&run, &art, resume)?;
        let dpo = report.row("dpo-beam").expect("dpo row");
        rows.push(BetaRow {
            beta,
            chrf: dpo.chrf,
            bleu: dpo.bleu,
            exact_match: dpo.exact_match,
            repetition_rate: dpo.repetition_rate,
            training: report.training.clone(),
        });
        reference.get_or_insert((report.rows[0].clone(), report.rows[1].clone()));
    }
    let (base_beam, base_mbr) = reference.expect("non-empty");
    let report = BetaSweepReport { base_beam, base_mbr, rows };
    write_json(&cfg.out_dir.join("sweep-beta.json"), &report)?;
    let path = cfg.out_dir.join("sweep-beta.txt");
    fs::write(&path, report.to_table()).map_err(|e| Error::io(path, e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub strategy: Strategy,
    pub set_size: usize,
    pub triplets: usize,
    pub triplets_per_source: f64,
    pub chrf: f64,
    pub bleu: f64,
    pub exact_match: f64,
    pub repetition_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub base_beam: SystemScore,
    pub base_mbr: Vec<SystemScore>,
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn cell(&self, strategy: Strategy, set_size: usize) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.strategy == strategy && c.set_size == set_size)
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![self.base_beam.clone()];
        rows.extend(self.base_mbr.iter().cloned());
        let mut out = score_table(&rows);
        let _ = writeln!(
            out,
            "\n{:<8} {:>4} {:>8} {:>8} {:>8} {:>8} {:>9}",
            "strategy", "|H|", "chrF", "BLEU", "exact", "repeat", "pairs/src"
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<8} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.3}",
                c.strategy.to_string(),
                c.set_size,
                c.chrf,
                c.bleu,
                c.exact_match,
                c.repetition_rate,
                c.triplets_per_source
            );
        }
        out
    }
}

/// DPO runs for every (strategy, |H|) cell. The base model is shared by all
/// cells and the samples by all cells with the same |H|.
pub fn run_strategy_grid(cfg: &ExperimentConfig, strategies: &[Strategy], set_sizes: &[usize], resume: bool) -> Result<GridReport> {
    if strategies.is_empty() || set_sizes.is_empty() {
        return Err(Error::Empty("strategy grid"));
    }
    let mut base_beam = None;
    let mut base_mbr = Vec::new();
    let mut cells = Vec::new();
    for &n in set_sizes {
        let sized = ExperimentConfig {
            sampling: SamplingConfig { set_size: n, ..cfg.sampling.clone() },
            ..cfg.clone()
        };
        let hdir = cfg.out_dir.join(format!("h{n}"));
        let shared = Artifacts {
            samples: hdir.join("samples"),
            ..cfg.artifacts()
        };
        run_shared_stages(&sized, &shared, resume)?;
        let sources = load_corpus(&shared)?.dpo_finetune.len();
        let reports: Vec<(Strategy, ExperimentReport)> = strategies
            .par_iter()
            .map(|&strategy| {
                let run = ExperimentConfig {
                    preference: PreferenceConfig { strategy, ..sized.preference.clone() },
                    ..sized.clone()
                };
                let cdir = hdir.join(strategy.to_string());
                let art = Artifacts {
                    prefs: cdir.join("prefs"),
                    dpo: cdir.join("dpo"),
                    eval: cdir.join("eval"),
                    ..shared.clone()
                };
                Ok((strategy, run_dpo_stages(&run, &art, resume)?))
            })
            .collect::<Result<_>>()?;
        base_beam.get_or_insert_with(|| reports[0].1.rows[0].clone());
        base_mbr.push(reports[0].1.rows[1].clone());
        for (strategy, report) in reports {
            let dpo = report.row("dpo-beam").expect("dpo row");
            cells.push(GridCell {
                strategy,
                set_size: n,
                triplets: report.training.triplets,
                triplets_per_source: report.training.triplets as f64 / sources as f64,
                chrf: dpo.chrf,
                bleu: dpo.bleu,
                exact_match: dpo.exact_match,
                repetition_rate: dpo.repetition_rate,
            });
        }
    }
    let report = GridReport {
        base_beam: base_beam.expect("non-empty grid"),
        base_mbr,
        cells,
    };
    write_json(&cfg.out_dir.join("grid-strategy.json"), &report)?;
    let path = cfg.out_dir.join("grid-strategy.txt");
    fs::write(&path, report.to_table()).map_err(|e| Error::io(path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::SplitSizes;

    pub(crate) fn small_config(root: &Path) -> ExperimentConfig {
        ExperimentConfig {
            out_dir: root.to_path_buf(),
            task: TaskSpec {
                alphabet_size: 6,
                min_len: 3,
                max_len: 5,
                splits: SplitSizes {
                    base_train: 40,
                    dpo_finetune: 8,
                    heldout: 4,
                    test: 6,
                },
                ..TaskSpec::default()
            },
            model: ModelConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ff: 16,
                max_len: 24,
                ..ModelConfig::default()
            },
            base: MleConfig {
                epochs: 2,
                batch_size: 8,
                ..MleConfig::default()
            },
            sampling: SamplingConfig {
                set_size: 4,
                ..SamplingConfig::default()
            },
            dpo: DpoConfig {
                learning_rate: 1e-3,
                ..DpoConfig::default()
            },
            decode: DecodeConfig {
                beam_width: 2,
                max_len: None,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn repetition_rate_examples() {
        let clean: Vec<TokenId> = (4..12).collect();
        let looped: Vec<TokenId> = [4, 5, 6, 7].repeat(3);
        assert_eq!(repetition_rate(std::slice::from_ref(&clean)), 0.0);
        assert_eq!(repetition_rate(std::slice::from_ref(&looped)), 1.0);
        assert_eq!(repetition_rate(&[looped, clean]), 0.5);
        assert_eq!(repetition_rate(&[vec![4; 5]]), 1.0);
        assert_eq!(repetition_rate(&[vec![4; 4]]), 0.0);
        assert_eq!(repetition_rate(&[]), 0.0);
    }

    #[test]
    fn decile_means_cover_at_least_one_step() {
        assert_eq!(decile_means(&[1.0, 2.0, 3.0]), Some((1.0, 3.0)));
        let s: Vec<f64> = (0..20).map(f64::from).collect();
        assert_eq!(decile_means(&s), Some((0.5, 18.5)));
        assert_eq!(decile_means(&[]), None);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = small_config(Path::new("out"));
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("out_dir = \"x\"\n[dpo]\nbeta = 0.1\n").unwrap();
        assert_eq!(partial.dpo.beta, 0.1);
        assert_eq!(partial.task, TaskSpec::default());
        assert!(ExperimentConfig::from_toml("[dpo]\nbeta = -1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[preference]\nstrategy = \"zz\"\n").is_err());
    }

    #[test]
    fn pipeline_runs_resumes_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = small_config(&dir.path().join("a"));
        let b = small_config(&dir.path().join("b"));
        let ra = run_pipeline(&a, false).unwrap();
        let rb = run_pipeline(&b, false).unwrap();
        assert_eq!(ra, rb);
        let bytes = |c: &ExperimentConfig| fs::read(c.artifacts().report_json()).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(ra.rows.len(), 3);
        assert_eq!(ra.rows[1].system, "base-mbr@4");

        // A resumed run skips everything but evaluation.
        let ckpt = a.artifacts().base_checkpoint();
        let before = fs::metadata(&ckpt).unwrap().modified().unwrap();
        assert_eq!(run_pipeline(&a, true).unwrap(), ra);
        assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), before);
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn zero_dpo_epochs_reproduce_the_base_beam_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.dpo.epochs = 0;
        let report = run_pipeline(&cfg, false).unwrap();
        let (base, dpo) = (&report.rows[0], &report.rows[2]);
        assert_eq!((base.chrf, base.bleu, base.exact_match), (dpo.chrf, dpo.bleu, dpo.exact_match));
        assert_eq!(report.training.steps, 0);
    }

    #[test]
    fn stage_failures_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let art = cfg.artifacts();
        run_shared_stages(&cfg, &art, false).unwrap();
        fs::write(art.ranked("dpo_finetune"), "garbage\n").unwrap();
        match run_dpo_stages(&cfg, &art, false) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "make-prefs"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sweep_and_grid_share_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let sweep = run_beta_sweep(&cfg, &[0.7], false).unwrap();
        assert_eq!(sweep.rows.len(), 1);
        assert!(run_beta_sweep(&cfg, &[], true).is_err());

        let grid = run_strategy_grid(
            &cfg,
            &[Strategy::BestWorst, Strategy::BestMiddleWorst, Strategy::ConsecutivePairs, Strategy::ConsecutivePairsStride(2)],
            &[4],
            true,
        )
        .unwrap();
        assert_eq!(grid.cells.len(), 4);
        assert_eq!(grid.base_mbr.len(), 1);
        assert_eq!(grid.base_beam, sweep.base_beam);
        for c in &grid.cells {
            let max = match c.strategy {
                Strategy::BestWorst => 1.0,
                Strategy::BestMiddleWorst => 2.0,
                Strategy::ConsecutivePairs => 3.0,
                Strategy::ConsecutivePairsStride(_) => 1.0,
            };
            assert!(c.triplets_per_source <= max);
        }
    }
}
