//! `rbft`: one subcommand per pipeline phase.
//!
//! Success prints one artifact path per line and exits 0. Failure prints a
//! single line `error=<class> <message>` to stderr and exits with the class
//! code: 2 config, 3 missing prerequisite, 4 backend, 5 internal invariant.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rbft_core::ablation::Condition;

use commands::Ctx;
use config::{parse_assignment, RunConfig};
use error::classify;

#[derive(Debug, Parser)]
#[command(name = "rbft", version, about = "Rationale-bootstrapped fine-tuning pipeline")]
struct Cli {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable and applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_assignment)]
    set: Vec<(String, String)>,
    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConditionArg {
    Original,
    Object,
    Random,
}

impl From<ConditionArg> for Condition {
    fn from(c: ConditionArg) -> Self {
        match c {
            ConditionArg::Original => Condition::Original,
            ConditionArg::Object => Condition::Object,
            ConditionArg::Random => Condition::Random,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate rationales for one split with the configured backend.
    GenRationales {
        #[arg(long, value_parser = ["train", "test"])]
        split: Option<String>,
    },
    /// Mix self and ground-truth rationales into the Stage-I dataset.
    BuildStage1,
    /// Train the rationale stage from the base model.
    TrainStage1,
    /// Train the classify stage from the Stage-I checkpoint.
    TrainStage2 {
        /// Start from the base model instead (Direct-SFT).
        #[arg(long)]
        direct: bool,
    },
    /// Train the classify stage directly from the base model.
    TrainDirect,
    /// Evaluate a classifier under one frame condition.
    Evaluate {
        #[arg(long, value_enum, default_value = "original")]
        condition: ConditionArg,
        /// Classifier checkpoint directory (sets eval.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a classifier on original, object-masked and random-masked frames.
    AblateMask {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render attention heatmaps for the first test samples.
    AttnMap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of test samples (sets ablation.heatmap_samples).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run the synthetic RB-FT vs Direct-SFT comparison.
    Toybench {
        /// Number of seeds (sets toybench.seeds).
        #[arg(long)]
        seeds: Option<usize>,
        /// Only write the per-seed datasets.
        #[arg(long)]
        data_only: bool,
    },
    /// Collect every report under `reports/` into one table.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenRationales { .. } => "gen-rationales",
            Command::BuildStage1 => "build-stage1",
            Command::TrainStage1 => "train-stage1",
            Command::TrainStage2 { .. } => "train-stage2",
            Command::TrainDirect => "train-direct",
            Command::Evaluate { .. } => "evaluate",
            Command::AblateMask { .. } => "ablate-mask",
            Command::AttnMap { .. } => "attn-map",
            Command::Toybench { .. } => "toybench",
            Command::Report => "report",
        }
    }

    /// Flags that are shorthands for config keys.
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        match self {
            Command::GenRationales { split: Some(s) } => put("generation.split", s.clone()),
            Command::Evaluate { checkpoint: Some(c), .. } | Command::AblateMask { checkpoint: Some(c) } => {
                put("eval.checkpoint", c.display().to_string())
            }
            Command::AttnMap { checkpoint, samples } => {
                if let Some(c) = checkpoint {
                    put("eval.checkpoint", c.display().to_string());
                }
                if let Some(n) = samples {
                    put("ablation.heatmap_samples", n.to_string());
                }
            }
            Command::Toybench { seeds: Some(n), .. } => put("toybench.seeds", n.to_string()),
            _ => {}
        }
        kv
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.set.clone();
    if let Some(cmd) = &cli.command {
        overrides.extend(cmd.overrides());
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    if cli.print_config {
        print!("{}", cfg.render());
        return Ok(());
    }
    let Some(cmd) = cli.command else {
        return Err(error::CliError::Config(vec!["no subcommand given (see --help)".into()]).into());
    };
    let ctx = Ctx::new(cfg);
    let mut outputs = match &cmd {
        Command::GenRationales { .. } => commands::gen_rationales(&ctx)?,
        Command::BuildStage1 => commands::build_stage1(&ctx)?,
        Command::TrainStage1 => commands::train_stage1(&ctx)?,
        Command::TrainStage2 { direct } => commands::train_stage2(&ctx, *direct)?,
        Command::TrainDirect => commands::train_direct(&ctx)?,
        Command::Evaluate { condition, .. } => commands::evaluate(&ctx, (*condition).into())?,
        Command::AblateMask { .. } => commands::ablate_mask(&ctx)?,
        Command::AttnMap { .. } => commands::attn_map(&ctx)?,
        Command::Toybench { data_only, .. } => commands::toybench(&ctx, *data_only)?,
        Command::Report => commands::report(&ctx)?,
    };
    let inputs: Vec<PathBuf> = ["data.manifest", "data.ground_truth", "prompts.template", "prompts.dimensions"]
        .iter()
        .filter_map(|k| ctx.cfg.path(k))
        .collect();
    outputs.extend(ctx.persist(cmd.name(), &inputs, &outputs)?);
    for p in outputs {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let class = classify(&err);
            let message = format!("{err:#}").replace('\n', " ");
            eprintln!("error={} {message}", class.name());
            ExitCode::from(class.exit_code())
        }
    }
}
