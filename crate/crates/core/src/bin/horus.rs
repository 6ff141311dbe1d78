use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use horus_core::cli::{cmd_diagnose, cmd_run, cmd_sweep, Overrides, SweepAxis};
use horus_core::output::Summary;

#[derive(Parser)]
#[command(name = "horus", version, about = "Robust federated LoRA aggregation experiments")]
struct Cli {
    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run { config: PathBuf },
    /// Run one experiment per value of a parameter.
    Sweep {
        config: PathBuf,
        /// lambda, rank or aggregator.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Run one experiment and record per-client spectral diagnostics.
    Diagnose { config: PathBuf },
}

fn print_summary(s: &Summary) {
    println!(
        "{} seed {}: final acc {:.4} (local {:.4}), recall {:.3}, precision {:.3}, payload {} B",
        s.aggregator, s.seed, s.final_global_accuracy, s.final_local_accuracy, s.mean_recall, s.mean_precision, s.total_payload_bytes
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides { seed: cli.seed, output_dir: cli.output_dir };
    let result = match &cli.command {
        Command::Run { config } => cmd_run(config, &overrides).map(|s| print_summary(&s)),
        Command::Diagnose { config } => cmd_diagnose(config, &overrides).map(|s| print_summary(&s)),
        Command::Sweep { config, axis, values } => cmd_sweep(config, *axis, values, &overrides).map(|cells| {
            for (v, s) in cells {
                print!("{}={v}: ", axis.as_str());
                print_summary(&s);
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
