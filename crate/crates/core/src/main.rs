use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use abstain_core::harness::{external_conformal, gen_synth_scores, ExperimentConfig, Run};
use abstain_core::score::read_scored_records;
use abstain_core::{fsio, Error, Result};

/// Conformal abstention experiments on an instrumented toy transformer.
#[derive(Parser)]
#[command(name = "abstain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory shared by all stages.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// `dotted.key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scored records as JSONL.
    GenSynth {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.6)]
        accuracy: f64,
        /// 0 makes scores independent of correctness, 1 nearly separates them.
        #[arg(long, default_value_t = 0.5)]
        dependence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the fact corpus and splits, then train the model.
    TrainToy(Common),
    /// Decode every query and compute per-token geometry features.
    Extract(Common),
    /// Fit the correct and incorrect feature distributions.
    FitStats(Common),
    /// Fit the token calibrator on the train split.
    FitCalibrator(Common),
    /// Score every response.
    Score(Common),
    /// Monte Carlo participation and correctness sweep.
    Conformal {
        #[command(flatten)]
        common: Common,
        /// Scored-record JSONL to use instead of the pipeline's scores.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Ranking metrics and geometry summaries on held-out data.
    Evaluate(Common),
    /// Permutation ablation of the geometry signal groups.
    Ablate(Common),
    /// Every stage in order.
    RunAll(Common),
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &c.overrides {
        cfg.set(kv)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage(c: &Common, name: &str) -> Result<()> {
    Run::new(resolve(c)?, &c.out)?.stage(name)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth {
            n,
            accuracy,
            dependence,
            seed,
            out,
        } => {
            let rows = gen_synth_scores(n, accuracy, dependence, seed)?;
            fsio::write_jsonl(&out, &rows)
        }
        Command::TrainToy(c) => stage(&c, "train-toy"),
        Command::Extract(c) => stage(&c, "extract"),
        Command::FitStats(c) => stage(&c, "fit-stats"),
        Command::FitCalibrator(c) => stage(&c, "fit-calibrator"),
        Command::Score(c) => stage(&c, "score"),
        Command::Conformal { common, scores: None } => stage(&common, "conformal"),
        Command::Conformal {
            common,
            scores: Some(path),
        } => {
            let cfg = resolve(&common)?;
            let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let records = read_scored_records(BufReader::new(file))?;
            external_conformal(&cfg, &records, &common.out).map(|_| ())
        }
        Command::Evaluate(c) => stage(&c, "evaluate"),
        Command::Ablate(c) => stage(&c, "ablate"),
        Command::RunAll(c) => Run::new(resolve(&c)?, &c.out)?.run_all(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
