//! Command-line driver: simulate synthetic experiment data, reconstruct
//! photon statistics and parity curves from it, and render figure data.

mod commands;
mod svg;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use wignerlab_core::config::ExperimentConfig;
use wignerlab_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "wignerlab",
    about = "Direct Wigner-function sampling with a time-multiplexed click detector: \
             simulation, data-pattern tomography, and figure assembly",
    version
)]
struct Cli {
    /// TOML configuration file (built-in defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the per-record shot count.
    #[arg(long, global = true)]
    shots: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the reference-signal mode overlap.
    #[arg(long, global = true)]
    overlap: Option<f64>,

    /// Disable afterpulsing entirely (both modes, no cross coupling).
    #[arg(long, global = true)]
    no_afterpulse: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic click records: probe library, displaced states for
    /// both overlap settings, reference-only beams, undisplaced source.
    Simulate,
    /// Run calibration and pattern tomography over a simulated data
    /// directory; write parity curves, fits, and reconstructions.
    Reconstruct {
        /// Data directory (defaults to the configured output directory).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render figure data: tidy long-format CSV plus SVG plots.
    Figures {
        /// Data directory holding reconstruction outputs.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Quick numerical self-checks of the core pipeline.
    Selftest,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Invalid(_) => 2,
        Error::Parse { .. } | Error::MissingData(_) | Error::Io(_) | Error::Json { .. } => 3,
        _ => 4,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, (u8, String)> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| (3u8, format!("{}: {e}", path.display())))?;
            toml::from_str::<ExperimentConfig>(&text)
                .map_err(|e| (2u8, format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(shots) = cli.shots {
        cfg.shots = shots;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(overlap) = cli.overlap {
        cfg.source.overlap = overlap;
    }
    if cli.no_afterpulse {
        cfg.detector_s.p_ap = 0.0;
        cfg.detector_i.p_ap = 0.0;
        cfg.cross_mode_afterpulse = false;
    }
    cfg.validate().map_err(|e| (2u8, e.to_string()))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Reconstruct { data } => {
            let dir = data.clone().unwrap_or_else(|| cfg.output_dir.clone());
            commands::reconstruct(&cfg, &dir)
        }
        Command::Figures { data } => {
            let dir = data.clone().unwrap_or_else(|| cfg.output_dir.clone());
            commands::figures(&dir)
        }
        Command::Selftest => commands::selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
