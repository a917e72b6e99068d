//! Command-line driver: simulate scenes, build maps, evaluate them and run
//! the baseline matrix. Every command writes into one run directory and
//! finishes with a `manifest.json` describing how to reproduce it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod rundir;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use hdmap_core::metrics::{DEFAULT_CELL, DEFAULT_EVAL_GATE};
use hdmap_core::par::Execution;

use crate::config::{BuildBaseline, Cameras};
use crate::error::CliError;

/// Environment variable holding the log filter (`error`, `info`, `debug`, ...).
pub const LOG_ENV: &str = "HDMAP_LOG";

#[derive(Debug, Parser)]
#[command(name = "hdmap", version, about = "Marking-level HD maps with IPM self-calibration")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: poses, detections, calibration, truth.
    Simulate {
        /// Scene description (TOML); the reference scene when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a map from detections, poses and calibration.
    Build {
        /// Build description (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        baseline: Option<BuildBaseline>,
        #[arg(long, value_enum)]
        cameras: Option<Cameras>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a map file against a ground-truth file.
    Evaluate {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EVAL_GATE)]
        gate: f64,
        #[arg(long, default_value_t = DEFAULT_CELL)]
        cell: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every baseline over every camera setup on one simulated scene.
    BaselineMatrix {
        /// Matrix description (TOML); the reference scene when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let exec = cli.sequential.then_some(Execution::Sequential);
    let default_exec = exec.unwrap_or_default();
    match cli.command {
        Command::Simulate { config, seed, out } => commands::simulate(config.as_deref(), seed, default_exec, &out),
        Command::Build {
            config,
            baseline,
            cameras,
            out,
        } => commands::build(&config, baseline, cameras, exec, &out),
        Command::Evaluate {
            map,
            truth,
            gate,
            cell,
            out,
        } => commands::evaluate_maps(&map, &truth, gate, cell, default_exec, &out),
        Command::BaselineMatrix { config, out } => commands::baseline_matrix(config.as_deref(), exec, &out),
    }
}
