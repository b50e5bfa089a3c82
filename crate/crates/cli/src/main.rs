use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use jointcvae_cli::commands;
use jointcvae_cli::config::RunConfig;
use jointcvae_cli::CliError;

#[derive(Parser)]
#[command(name = "jointcvae", about = "Joint multi-agent trajectory prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus
    Generate(Common),
    /// Train a model on a scene file
    Train(Common),
    /// Sample futures for the evaluation split
    Predict(Common),
    /// Score predictions
    Evaluate(Common),
    /// Interaction-density diagnostics
    Stats(Common),
    /// Generate, train every variant, evaluate and print the ablation table
    Reproduce(Common),
}

#[derive(Args)]
struct Common {
    /// config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// tiny sizes for a quick end-to-end pass
    #[arg(long)]
    smoke: bool,
    /// override one setting, e.g. --set train.steps=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::default();
        if self.smoke {
            config = config.smoke();
        }
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        for pair in &self.overrides {
            config.apply_override(pair)?;
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
            if self.smoke {
                config.reproduce.seeds = vec![seed];
            }
        }
        config.resolve()
    }
}

/// Wall-clock times go to their own log so every other output stays
/// byte-identical across runs.
fn log_timing(config: &RunConfig, name: &str, started: Instant) {
    let path = config.out.join("timing.log");
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
        let _ = writeln!(f, "{name} {:.3}s", started.elapsed().as_secs_f64());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Generate(c) => ("generate", c),
        Command::Train(c) => ("train", c),
        Command::Predict(c) => ("predict", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Stats(c) => ("stats", c),
        Command::Reproduce(c) => ("reproduce", c),
    };
    let config = common.resolve()?;
    let started = Instant::now();
    let written = match cli.command {
        Command::Generate(_) => commands::generate_cmd(&config)?,
        Command::Train(_) => commands::train_cmd(&config)?,
        Command::Predict(_) => commands::predict_cmd(&config)?,
        Command::Evaluate(_) => commands::evaluate_cmd(&config)?,
        Command::Stats(_) => commands::stats_cmd(&config)?,
        Command::Reproduce(_) => commands::reproduce_cmd(&config, |m| eprintln!("training {m}"))?,
    };
    log_timing(&config, name, started);
    for path in &written {
        println!("wrote {}", path.display());
    }
    if name == "reproduce" || name == "evaluate" {
        let table = if name == "reproduce" { "ablation.txt" } else { "metrics.txt" };
        if let Ok(text) = std::fs::read_to_string(config.out.join(table)) {
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
