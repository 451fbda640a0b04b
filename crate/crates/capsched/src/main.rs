use std::path::PathBuf;
use std::process::ExitCode;

use capsched::{commands, load_config, CliError};
use clap::{Args, Parser, Subcommand};

/// Capacity-table scheduling simulator for overcommitted serverless clusters.
#[derive(Parser)]
#[command(name = "capsched", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Scenario {
    /// Scenario file (TOML, or a report.json with an embedded config).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set scaling.release_duration_s=30`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Inputs {
    /// Trace file to replay instead of generating one.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Trained model file to use instead of training one.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scenario's trace as trace.jsonl.
    GenTrace {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the forest and write model.json plus its accuracy report.
    Train {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one policy and write events.jsonl, report.json and summary.csv.
    Run {
        #[command(flatten)]
        scenario: Scenario,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        seed: u64,
    },
    /// Run capsched, kube and gsight on identical traces and seeds.
    Compare {
        #[command(flatten)]
        scenario: Scenario,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        seed: u64,
    },
    /// Print the summary of a finished run or comparison.
    Report {
        /// Directory holding summary.csv and report.json.
        #[arg(default_value = "out")]
        dir: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let load = |s: &Scenario, seed: Option<u64>| load_config(s.config.as_deref(), &s.overrides, seed);
    match cli.command {
        Command::GenTrace { scenario, seed } => {
            let cfg = load(&scenario, seed)?;
            let path = commands::gen_trace(&cfg, &scenario.out)?;
            Ok(format!("{}\n", path.display()))
        }
        Command::Train { scenario, seed } => {
            let cfg = load(&scenario, seed)?;
            let doc = commands::train(&cfg, &scenario.out)?;
            let text = serde_json::to_string_pretty(&doc.accuracy).map_err(|e| CliError::input(e.to_string()))?;
            Ok(text + "\n")
        }
        Command::Run { scenario, inputs, seed } => {
            let cfg = load(&scenario, Some(seed))?;
            commands::run(&cfg, &scenario.out, inputs.trace.as_deref(), inputs.model.as_deref())?;
            commands::report(&scenario.out)
        }
        Command::Compare { scenario, inputs, seed } => {
            let cfg = load(&scenario, Some(seed))?;
            commands::compare(&cfg, &scenario.out, inputs.trace.as_deref(), inputs.model.as_deref())?;
            commands::report(&scenario.out)
        }
        Command::Report { dir } => commands::report(&dir),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
