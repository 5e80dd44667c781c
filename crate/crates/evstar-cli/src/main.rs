//! Command-line driver for the star-tracking pipeline.
//!
//! Subcommands: `simulate`, `track`, `evaluate`, `calibrate`. Exit code 0 on
//! success, nonzero with a stage-tagged message otherwise.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use evstar::pipeline::{
    cmd_calibrate, cmd_evaluate, cmd_simulate, cmd_track_files, PipelineConfig,
};

#[derive(Parser)]
#[command(
    name = "evstar",
    about = "Event-camera star tracking: simulation, attitude estimation, evaluation, calibration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event stream with ground-truth attitudes.
    Simulate {
        /// Pipeline configuration file (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the simulation RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the attitude trajectory from an event stream.
    Track {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a track run against ground-truth attitudes.
    Evaluate {
        /// Directory produced by `track`.
        #[arg(long)]
        run: PathBuf,
        /// Ground-truth attitude file.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the virtual-telescope calibration from correspondence files.
    Calibrate {
        /// 2D-2D pairs, rows `u,v,u',v'`.
        #[arg(long)]
        pairs_2d2d: PathBuf,
        /// 2D-3D pairs, rows `u,v,X,Y,Z`.
        #[arg(long)]
        pairs_2d3d: PathBuf,
        /// Event-camera intrinsics, one line `fx,fy,cx,cy,skew`.
        #[arg(long)]
        k_ev: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<PipelineConfig> {
    let mut config = match path {
        Some(p) => PipelineConfig::from_file(p)
            .with_context(|| format!("reading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = seed {
        config.sim.seed = seed;
    }
    Ok(config)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, seed, out } => {
            let config = load_config(&config, seed)?;
            let result = cmd_simulate(&config, &out)?;
            println!(
                "simulated {} events over {} frames into {}",
                result.events.len(),
                config.frame_count(),
                out.display()
            );
        }
        Command::Track {
            events,
            catalog,
            config,
            seed,
            out,
        } => {
            let config = load_config(&config, seed)?;
            let result = cmd_track_files(&events, &catalog, &config, &out)?;
            println!(
                "tracked {} frames ({} absolute rotations, {} relative pairs, {} tracks) into {}",
                result.bundled.len(),
                result.identification.iter().filter(|r| r.status == "ok").count(),
                result.relatives.len(),
                result.tracks.len(),
                out.display()
            );
            if result.gauge_free {
                println!("warning: no absolute rotations; output gauge is arbitrary");
            }
            if !result.excluded_frames.is_empty() {
                println!(
                    "warning: {} frames had no usable measurements and were excluded",
                    result.excluded_frames.len()
                );
            }
        }
        Command::Evaluate { run, truth, out } => {
            let report = cmd_evaluate(&run, &truth, &out)?;
            let line = |label: &str, m: &Option<evstar::eval::MethodEvaluation>| {
                if let Some(m) = m {
                    println!(
                        "{label}: RMSE {:.4} deg, SD {:.4} deg over {} frames",
                        m.stats.rmse_deg, m.stats.sd_deg, m.stats.count
                    );
                }
            };
            line("chained ", &report.chained);
            line("averaged", &report.averaged);
            line("bundled ", &report.bundled);
            if let Some(rel) = report.relative_stats {
                println!(
                    "relative: RMSE {:.4} deg, SD {:.4} deg over {} pairs",
                    rel.rmse_deg, rel.sd_deg, rel.count
                );
            }
            if let Some(b) = report.absolute_buckets {
                println!(
                    "absolute rotations: <1deg {}, 1-10deg {}, >10deg {}",
                    b.below_1_deg, b.from_1_to_10_deg, b.above_10_deg
                );
            }
            println!("report written to {}", out.display());
        }
        Command::Calibrate {
            pairs_2d2d,
            pairs_2d3d,
            k_ev,
            out,
        } => {
            let solution = cmd_calibrate(&pairs_2d2d, &pairs_2d3d, &k_ev, &out)?;
            let q = solution.rotation.quaternion();
            println!(
                "calibrated: K_te fx={:.3} fy={:.3}, attitude q=({:.6},{:.6},{:.6},{:.6})",
                solution.k_te.fx, solution.k_te.fy, q.w, q.i, q.j, q.k
            );
            println!("solution written to {}", out.display());
        }
    }
    Ok(())
}
