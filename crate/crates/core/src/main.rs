use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mbr_dpo::harness::{self, Artifacts, ExperimentConfig};
use mbr_dpo::preference::Strategy;

#[derive(Parser)]
#[command(name = "mbr-dpo", version, about = "MBR-ranked preference data and DPO fine-tuning on synthetic translation tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Sets every stage seed to this value.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    InitConfig,
    /// Generate the synthetic corpus and split manifest.
    GenData(Common),
    /// Train the base model by maximum likelihood.
    TrainBase(Common),
    /// Draw hypothesis sets for the fine-tuning, held-out and test splits.
    Sample(Common),
    /// Rank hypothesis sets by MBR score.
    Rank(Common),
    /// Build preference triplets from the ranked sets.
    MakePrefs(Common),
    /// Fine-tune the base model with DPO.
    DpoTrain(Common),
    /// Decode the test split with every system and write the report.
    Evaluate(Common),
    /// Print a report written by `evaluate`, `run`, `sweep-beta` or `grid-strategy`.
    Report(Common),
    /// Run every stage in order, skipping stages already done with the same settings.
    Run {
        #[command(flatten)]
        common: Common,
        /// Rerun every stage even if its outputs are current.
        #[arg(long)]
        fresh: bool,
    },
    /// One DPO run per beta, sharing the base model and preference data.
    SweepBeta {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5, 0.7, 0.9])]
        betas: Vec<f64>,
        #[arg(long)]
        fresh: bool,
    },
    /// DPO runs over selection strategies and hypothesis set sizes.
    GridStrategy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = ["bw".to_string(), "bmw".to_string(), "cp".to_string(), "cps2".to_string()])]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32])]
        sizes: Vec<usize>,
        #[arg(long)]
        fresh: bool,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage<T>(name: &str, f: impl FnOnce() -> mbr_dpo::Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().with_context(|| format!("stage {name} failed"))?;
    eprintln!("{name}: done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(out)
}

fn print_file(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig => print!("{}", ExperimentConfig::default().to_toml()?),
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let corpus = stage("gen-data", || harness::gen_data(&cfg.task, &cfg.artifacts()))?;
            for (name, examples) in corpus.splits() {
                println!("{name}: {} examples", examples.len());
            }
        }
        Command::TrainBase(c) => {
            let cfg = load_config(&c)?;
            let params = stage("train-base", || harness::train_base(&cfg, &cfg.artifacts()))?;
            println!("{} parameters -> {}", params.num_parameters(), cfg.artifacts().base_checkpoint().display());
        }
        Command::Sample(c) => {
            let cfg = load_config(&c)?;
            stage("sample", || harness::sample(&cfg.sampling, &cfg.artifacts()))?;
        }
        Command::Rank(c) => {
            let cfg = load_config(&c)?;
            stage("rank", || harness::rank(cfg.utility, &cfg.artifacts()))?;
        }
        Command::MakePrefs(c) => {
            let cfg = load_config(&c)?;
            let n = stage("make-prefs", || harness::make_prefs(&cfg.preference, &cfg.artifacts()))?;
            println!("{n} triplets ({})", cfg.preference.strategy);
        }
        Command::DpoTrain(c) => {
            let cfg = load_config(&c)?;
            let trace = stage("dpo-train", || harness::dpo_train(&cfg.dpo, &cfg.artifacts()))?;
            if let Some((a, b)) = harness::decile_means(&trace.moving_average) {
                println!("{} steps; moving-average margin first 10% {a:.4}, final 10% {b:.4}", trace.raw.len());
            }
        }
        Command::Evaluate(c) => {
            let cfg = load_config(&c)?;
            let art = cfg.artifacts();
            stage("decode-base", || harness::decode_base(&cfg.decode, &art))?;
            stage("decode-mbr", || harness::decode_mbr(&art))?;
            stage("decode-dpo", || harness::decode_dpo(&cfg.decode, &art))?;
            let report = stage("evaluate", || harness::evaluate(&cfg, &art))?;
            print!("{}", report.to_table());
        }
        Command::Report(c) => {
            let cfg = load_config(&c)?;
            let candidates = [
                Artifacts::new(&cfg.out_dir).report_txt(),
                cfg.out_dir.join("sweep-beta.txt"),
                cfg.out_dir.join("grid-strategy.txt"),
            ];
            let mut found = false;
            for path in candidates.iter().filter(|p| p.exists()) {
                println!("== {}", path.display());
                print_file(path)?;
                found = true;
            }
            if !found {
                bail!("no reports under {}", cfg.out_dir.display());
            }
        }
        Command::Run { common, fresh } => {
            let cfg = load_config(&common)?;
            let report = stage("pipeline", || harness::run_pipeline(&cfg, !fresh))?;
            print!("{}", report.to_table());
        }
        Command::SweepBeta { common, betas, fresh } => {
            let cfg = load_config(&common)?;
            let report = stage("sweep-beta", || harness::run_beta_sweep(&cfg, &betas, !fresh))?;
            print!("{}", report.to_table());
        }
        Command::GridStrategy {
            common,
            strategies,
            sizes,
            fresh,
        } => {
            let cfg = load_config(&common)?;
            let strategies = strategies
                .iter()
                .map(|s| s.parse::<Strategy>())
                .collect::<mbr_dpo::Result<Vec<_>>>()?;
            let report = stage("grid-strategy", || harness::run_strategy_grid(&cfg, &strategies, &sizes, !fresh))?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
