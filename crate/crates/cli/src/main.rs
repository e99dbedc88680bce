use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lagrow_cli::commands::{cmd_analyze, cmd_eval, cmd_grow, cmd_race, cmd_stack, cmd_train, AnalyzeOptions};
use lagrow_cli::{CliError, Result, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lagrow", version, about = "Grow transformer depth by racing growth operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set race.k_race=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut sets = self.sets.clone();
        if let Some(o) = &self.out {
            let o = o.to_str().ok_or_else(|| CliError::config("--out must be valid UTF-8"))?;
            sets.push(format!("out_dir={}", toml::Value::String(o.to_string())));
        }
        RunConfig::load(self.config.as_deref(), &sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model from random init.
    Train(ConfigArgs),
    /// Apply one growth operator to a checkpoint.
    Grow {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Operator string `i{start}-b{block}-{dup|rand}-k{grow}`, 0-based start.
        #[arg(long)]
        operator: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Race every operator of the configured design space from a checkpoint.
    Race {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Progressive stacking, adaptive and/or fixed.
    Stack(ConfigArgs),
    /// Correlation, recall, regret and phase-transition analysis of traces.
    Analyze {
        /// `candidate,step,loss` CSV, e.g. the `traces.csv` of a race.
        #[arg(long)]
        traces: PathBuf,
        /// Absolute step whose losses count as final (default: last step).
        #[arg(long)]
        horizon: Option<u64>,
        /// Centered moving-average window (odd) applied before analysis.
        #[arg(long)]
        smooth: Option<usize>,
        #[arg(long, default_value_t = lagrow::analysis::PHASE_THRESHOLD)]
        tau: f64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Validation loss of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn emit<T: Serialize>(v: T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => emit(cmd_train(&c.load()?)?),
        Command::Grow { checkpoint, operator, seed, out } => emit(cmd_grow(&checkpoint, &operator, seed, &out)?),
        Command::Race { checkpoint, config } => emit(cmd_race(&config.load()?, &checkpoint)?),
        Command::Stack(c) => emit(cmd_stack(&c.load()?)?),
        Command::Analyze { traces, horizon, smooth, tau, out } => {
            emit(cmd_analyze(&traces, &AnalyzeOptions { horizon, smooth, tau }, &out)?)
        }
        Command::Eval { checkpoint, config } => emit(cmd_eval(&config.load()?, &checkpoint)?),
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
