//! `stcl`: run, evaluate, profile and compare shape-texture debiased
//! continual-learning experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use stcl::experiment::{
    compare_runs, landscape_for, load_dataset, load_reports, run_experiment, run_seed, write_landscape,
    ExperimentConfig, Overrides, RunKind,
};
use stcl::trainer::{TrainerState, TrainingMode};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "stcl", version, about = "Shape-texture debiased class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run only these seeds (repeatable); defaults to the config's list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Override the training mode.
    #[arg(long)]
    mode: Option<String>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Continue from the latest per-step checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Re-evaluate completed runs from their final checkpoints.
    Eval {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Profile the base-task loss landscape of the final model.
    Landscape {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Compare two run sets (mode directories or report files).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Write the comparison as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Errors that should exit with the config code.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let to_config = |e: stcl::Error| -> anyhow::Error {
        if e.is_config() {
            ConfigError(e.to_string()).into()
        } else {
            e.into()
        }
    };
    let mode = args
        .mode
        .as_deref()
        .map(str::parse::<TrainingMode>)
        .transpose()
        .map_err(to_config)?;
    let overrides = Overrides {
        seeds: (!args.seeds.is_empty()).then(|| args.seeds.clone()),
        mode,
        output_dir: args.out.clone(),
    };
    ExperimentConfig::load(&args.config)
        .and_then(|c| c.with_overrides(&overrides))
        .map_err(to_config)
}

fn print_reports(reports: &[stcl::experiment::RunReport]) {
    for r in reports {
        let m = &r.metrics;
        println!(
            "{} seed {}: avg_inc_acc {:.2}  final_acc {:.2}  forgetting {:.2}  mce {:.2}{}",
            r.mode,
            r.seed,
            m.avg_inc_acc,
            m.final_acc,
            m.forgetting,
            m.mce,
            m.domain_shift_acc
                .map(|d| format!("  domain_shift_proxy {d:.2}"))
                .unwrap_or_default()
        );
    }
}

fn landscape(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    for &seed in &cfg.seeds {
        let dir = cfg.run_dir(seed);
        let last = dir.join("checkpoints").join(format!("step-{}", cfg.protocol.increments));
        let dataset = load_dataset(cfg, seed)?;
        let state = TrainerState::load(&last, &dataset)
            .with_context(|| format!("loading final checkpoint {}", last.display()))?;
        let profile = landscape_for(cfg, &state.model, &dataset, &state.tasks, seed)?;
        write_landscape(&dir, &profile, &format!("{} seed {seed}", cfg.mode))?;
        println!("seed {seed}:");
        for (a, l) in profile.alphas.iter().zip(&profile.mean_loss) {
            println!("  alpha {a:+.3}  loss {l:.5}");
        }
    }
    Ok(())
}

fn compare(a: &Path, b: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let ra = load_reports(a)?;
    let rb = load_reports(b)?;
    let cmp = compare_runs(&ra, &rb)?;
    print!("{}", cmp.to_table());
    if let Some(out) = out {
        std::fs::write(out, serde_json::to_string_pretty(&cmp)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { args, resume } => {
            let cfg = load_config(&args)?;
            let kind = if resume { RunKind::Resume } else { RunKind::Fresh };
            print_reports(&run_experiment(&cfg, kind)?);
        }
        Command::Eval { args } => {
            let cfg = load_config(&args)?;
            let reports = cfg
                .seeds
                .iter()
                .map(|&s| run_seed(&cfg, s, &cfg.run_dir(s), RunKind::EvalOnly))
                .collect::<Result<Vec<_>, _>>()?;
            print_reports(&reports);
        }
        Command::Landscape { args } => landscape(&load_config(&args)?)?,
        Command::Compare { a, b, out } => compare(&a, &b, out.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
