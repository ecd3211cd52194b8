use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oneshot_dil::cli::{self, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(version, about = "One-shot domain incremental learning experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on the original domain and save a checkpoint.
    TrainBase { config: PathBuf },
    /// Learning-rate search and evaluation for each misclassified new sample.
    OneShot { config: PathBuf },
    /// Every method × statistics mode × batch regime, paired on the same samples.
    Sweep { config: PathBuf },
    /// Batch-norm running-statistics traces in the one-shot and many-shot regimes.
    Trace { config: PathBuf },
    /// Print the configuration with all defaults filled in.
    ShowConfig { config: PathBuf },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::TrainBase { config } => {
            let r = cli::cmd_train_base(&ExperimentConfig::load(&config)?)?;
            println!("base accuracy: original {:.4}, new {:.4}", r.acc_orig, r.acc_new);
        }
        Command::OneShot { config } => {
            let r = cli::cmd_one_shot(&ExperimentConfig::load(&config)?)?;
            println!(
                "median accuracy: new {:.4} (std {:.4}), original {:.4} (std {:.4}); {}/{} converged",
                r.acc_new.median,
                r.acc_new.std,
                r.acc_orig.median,
                r.acc_orig.std,
                r.converged,
                r.rows.len()
            );
        }
        Command::Sweep { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = cli::cmd_sweep(&cfg)?;
            println!("{} cells written to {}", out.cells.len(), cfg.output_dir.join(cli::SWEEP_CSV).display());
        }
        Command::Trace { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = cli::cmd_trace(&cfg)?;
            let n = out.one_shot.len() + out.many_shot.len();
            println!("{n} traces written to {}", cfg.output_dir.join(cli::TRACE_DIR).display());
        }
        Command::ShowConfig { config } => {
            print!("{}", ExperimentConfig::load(&config)?.to_toml_string());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            for line in e.lines() {
                eprintln!("{line}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
