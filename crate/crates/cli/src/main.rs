//! `ritp`: scenario generation, the three training stages and closed-loop
//! evaluation.
//!
//! Exit codes: 0 success, 1 user error (usage, configuration, missing
//! inputs), 2 internal error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ritp", version = manifest::VERSION, about = "Reinforced imitative trajectory planning pipeline")]
struct Cli {
    /// Worker threads for data-parallel work (1 runs sequentially).
    #[arg(long, global = true, env = "RITP_NUM_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Configuration file: JSON object or `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset (desk or paper); overridden by a `preset` key in the file.
    #[arg(long)]
    preset: Option<String>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic scenario corpus and its manifest.
    GenScenarios {
        /// Comma-separated kinds or `all`.
        #[arg(long, default_value = "all")]
        kinds: String,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the Bayesian reward on logged demonstrations.
    TrainReward {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scenario directory; generated from the configuration when absent.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Imitation-pretrain the policy (the warm start).
    PretrainPolicy {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reinforced imitation training against the trained reward.
    TrainRitp {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Output directory of train-reward.
        #[arg(long)]
        reward: Option<PathBuf>,
        /// Output directory of pretrain-policy (needed when ws is on).
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop evaluation of a planner over a scenario corpus.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = ["ritp", "ritp-hybrid", "stay-logged", "idm-only"])]
        planner: String,
        /// nonreactive, idm_reactive or both.
        #[arg(long, default_value = "both")]
        mode: String,
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Directory holding actor.json (train-ritp) or policy.json (pretrain-policy).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        report: PathBuf,
        /// Also write one SVG per scenario and mode.
        #[arg(long)]
        plots: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let parallelism = match commands::workers(cli.workers) {
        Ok(p) => p,
        Err(e) => return report(e),
    };
    let result = match cli.command {
        Command::GenScenarios { kinds, count, seed, out } => commands::gen_scenarios(&kinds, count, seed, &out),
        Command::TrainReward { config, scenarios, out } => commands::train_reward(&config, scenarios.as_deref(), &out, parallelism),
        Command::PretrainPolicy { config, scenarios, out } => commands::pretrain_policy(&config, scenarios.as_deref(), &out, parallelism),
        Command::TrainRitp {
            config,
            scenarios,
            reward,
            pretrained,
            out,
        } => commands::train_ritp(&config, scenarios.as_deref(), reward.as_deref(), pretrained.as_deref(), &out, parallelism),
        Command::Simulate {
            config,
            planner,
            mode,
            scenarios,
            checkpoint,
            report,
            plots,
        } => commands::simulate(
            &config,
            &commands::SimulateArgs {
                planner: &planner,
                mode: &mode,
                scenarios: scenarios.as_deref(),
                checkpoint: checkpoint.as_deref(),
                report: &report,
                plots,
            },
            parallelism,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: commands::CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}
