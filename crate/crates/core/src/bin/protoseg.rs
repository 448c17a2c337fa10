//! `protoseg`: synthesize data, train, evaluate and tabulate results.
//!
//! Every command writes into `<out>/<run-id>/` and prints one JSON line.
//! Failures print a JSON error record to stderr and exit nonzero
//! (2: bad configuration or usage, 3: missing dataset, 1: anything else).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use protoseg::attention::AttentionVariant;
use protoseg::data::Split;
use protoseg::experiment::{self, ExperimentConfig, Preset, ReportFormat};
use protoseg::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "protoseg", version, about = "Few-shot prototypical defect segmentation")]
struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Dotted-key override, e.g. `finetune.loss.reg_weight=0.02`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output root (default: $PROTOSEG_OUT, then ./runs).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dataset root.
    #[arg(long, global = true, value_name = "DIR")]
    dataset: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic defect dataset.
    Synth {
        /// Number of images.
        #[arg(long)]
        count: Option<usize>,
        /// Image side length in pixels (multiple of 16).
        #[arg(long)]
        size: Option<usize>,
        /// Number of classes including background (2..=9).
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Stage 1: pretrain the encoder behind a frozen head.
    Pretrain {
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        ways: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Stage 2: fine-tune encoder and head from a pretraining checkpoint.
    Finetune {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        ways: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
        /// Attention head: none, sa, lsa or ca.
        #[arg(long)]
        attention: Option<AttentionVariant>,
        /// Train with the query loss only.
        #[arg(long)]
        unidirectional: bool,
    },
    /// Score a checkpoint on test episodes.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long)]
        ways: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
        /// Query images per episode.
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Dataset split to sample from: train, val, test or all.
        #[arg(long)]
        split: Option<Split>,
        /// Also report metrics of the pooled confusion matrix.
        #[arg(long)]
        pooled: bool,
    },
    /// Tabulate evaluation runs.
    Report {
        /// Run directories holding metrics.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// markdown, csv or json.
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum PresetArg {
    Desk,
    Full,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for assignment in &cli.set {
        cfg.set(assignment)?;
    }
    if let Some(out) = &cli.out {
        cfg.output = Some(out.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &cli.dataset {
        cfg.dataset = Some(d.clone());
    }
    match &cli.command {
        Command::Synth { count, size, classes } => {
            cfg.synth.count = count.unwrap_or(cfg.synth.count);
            cfg.synth.image_size = size.unwrap_or(cfg.synth.image_size);
            cfg.synth.num_classes = classes.unwrap_or(cfg.synth.num_classes);
        }
        Command::Pretrain {
            preset,
            episodes,
            ways,
            shots,
        } => {
            if let Some(p) = preset {
                cfg.preset = match p {
                    PresetArg::Desk => Preset::Desk,
                    PresetArg::Full => Preset::Full,
                };
            }
            let t = &mut cfg.pretrain;
            t.episodes = episodes.unwrap_or(t.episodes);
            t.episode_spec.n_ways = ways.unwrap_or(t.episode_spec.n_ways);
            t.episode_spec.k_shots = shots.unwrap_or(t.episode_spec.k_shots);
        }
        Command::Finetune {
            episodes,
            ways,
            shots,
            attention,
            unidirectional,
            ..
        } => {
            let t = &mut cfg.finetune;
            t.episodes = episodes.unwrap_or(t.episodes);
            t.episode_spec.n_ways = ways.unwrap_or(t.episode_spec.n_ways);
            t.episode_spec.k_shots = shots.unwrap_or(t.episode_spec.k_shots);
            t.attention = attention.unwrap_or(t.attention);
            if *unidirectional {
                t.loss.bidirectional = false;
            }
        }
        Command::Eval {
            ways,
            shots,
            queries,
            episodes,
            split,
            pooled,
            ..
        } => {
            let e = &mut cfg.eval;
            e.spec.n_ways = ways.unwrap_or(e.spec.n_ways);
            e.spec.k_shots = shots.unwrap_or(e.spec.k_shots);
            e.spec.n_query = queries.unwrap_or(e.spec.n_query);
            e.episodes = episodes.unwrap_or(e.episodes);
            e.pooled |= *pooled;
            cfg.eval_split = split.unwrap_or(cfg.eval_split);
        }
        Command::Report { .. } => {}
    }
    cfg.resolve()
}

fn run(cli: &Cli) -> Result<experiment::CommandOutcome> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Synth { .. } => experiment::run_synth(&cfg),
        Command::Pretrain { .. } => experiment::run_pretrain(&cfg),
        Command::Finetune { checkpoint, .. } => experiment::run_finetune(&cfg, checkpoint),
        Command::Eval { checkpoint, .. } => experiment::run_eval(&cfg, checkpoint),
        Command::Report { runs, format } => experiment::run_report(&cfg, runs, *format),
    }
}

fn fail(kind: &str, message: String, code: i32, key: Option<&str>) -> ExitCode {
    let record = json!({ "status": "error", "error": kind, "message": message, "key": key, "exit_code": code });
    eprintln!("{record}");
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string(), 2, None);
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            let mut record = serde_json::to_value(&outcome).expect("outcome serializes");
            record["status"] = json!("ok");
            println!("{record}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let key = match &e {
                Error::ConfigKey(k) => Some(k.as_str()),
                _ => None,
            };
            fail(e.kind(), e.to_string(), e.exit_code(), key)
        }
    }
}
