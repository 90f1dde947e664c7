//! `coreg`: simulate, record, inspect and analyze gaze/EEG reading sessions.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use coreg_cli::{CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "coreg",
    version,
    about = "Gaze and EEG co-registration toolkit"
)]
struct Cli {
    /// JSON config layered over the built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Seed for the simulator and the permutation/classifier RNGs
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a session into OUT/session.xdf with a truth.json sidecar
    Simulate,
    /// Record WebSocket clients into OUT/session.xdf until interrupted
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Print the per-stream summary of an XDF file
    Inspect { xdf: PathBuf },
    /// Analyze a session and write features.csv, report.json and report.md into OUT
    Analyze {
        xdf: PathBuf,
        /// Ratings fallback; defaults to truth.json next to the XDF file when present
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        k_sentences: Option<usize>,
    },
    /// Print the Markdown report of a previous analyze run
    Report { dir: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut ov = Overrides {
        seed: cli.seed,
        ..Default::default()
    };
    match &cli.command {
        Command::Serve { listen } => ov.listen = listen.clone(),
        Command::Analyze { k_sentences, .. } => ov.k_sentences = *k_sentences,
        _ => {}
    }
    match cli.command {
        Command::Inspect { xdf } => print!("{}", coreg_cli::cmd_inspect(&xdf)?),
        Command::Report { dir } => print!("{}", coreg_cli::cmd_report(&dir)?),
        Command::Simulate => {
            let cfg = RunConfig::resolve(cli.config.as_deref(), &ov)?;
            coreg_cli::cmd_simulate(&cfg, &cli.out)?;
        }
        Command::Serve { .. } => {
            let cfg = RunConfig::resolve(cli.config.as_deref(), &ov)?;
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
                .map_err(|e| CliError::Other(e.to_string()))?;
            coreg_cli::cmd_serve(&cfg, &cli.out, stop)?;
        }
        Command::Analyze { xdf, truth, .. } => {
            let cfg = RunConfig::resolve(cli.config.as_deref(), &ov)?;
            let report = coreg_cli::cmd_analyze(&cfg, &xdf, truth.as_deref(), &cli.out)?;
            for c in &report.comparisons {
                println!(
                    "{:<20} t = {:>8.3}  p = {:.4}  d = {:>7.3}",
                    c.feature_name, c.t_statistic, c.p_permutation, c.cohens_d
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COREG_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
