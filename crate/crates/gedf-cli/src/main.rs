//! `gedf` — build, query, evaluate and localize against continuous
//! Gaussian-mixture Euclidean distance field maps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/configuration error,
//! 3 numerical failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gedf::GedfError;

#[derive(Parser)]
#[command(name = "gedf", version, about = "Gaussian-mixture distance field toolkit")]
struct Cli {
    /// Cap the worker thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a map from a point cloud or a scene spec and write it to disk.
    Build(BuildArgs),
    /// Query distance and gradient at one or many points (CSV output).
    Query(QueryArgs),
    /// Evaluate reconstruction fidelity against a ground-truth cloud.
    Eval(EvalArgs),
    /// Replay a scan sequence against a map and write the trajectory.
    Localize(LocalizeArgs),
    /// Measure batch query throughput on a map.
    Bench(BenchArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct BuildInput {
    /// Input point cloud (.ply or whitespace xyz text).
    #[arg(long)]
    cloud: Option<PathBuf>,
    /// Scene spec file; the surface is sampled at --density.
    #[arg(long)]
    scene: Option<PathBuf>,
}

#[derive(Args)]
pub struct BuildArgs {
    #[command(flatten)]
    input: BuildInput,
    /// Layered TOML config; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output map path.
    #[arg(long, default_value = "map.bin")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Surface sampling density for scene specs, points per square meter.
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub block_size: Option<f64>,
    #[arg(long)]
    pub overlap_margin: Option<f64>,
    #[arg(long)]
    pub activation_distance: Option<f64>,
    /// Local EDT voxel size, meters.
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// Per-block fit target, meters.
    #[arg(long)]
    pub mae_tolerance: Option<f64>,
}

impl BuildArgs {
    pub fn cloud(&self) -> &Option<PathBuf> {
        &self.input.cloud
    }
    pub fn scene(&self) -> &Option<PathBuf> {
        &self.input.scene
    }
}

#[derive(Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Single query point as "x,y,z".
    #[arg(long, conflicts_with = "points", required_unless_present = "points")]
    pub point: Option<String>,
    /// File of query points (xyz text or .ply).
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Ground-truth surface cloud.
    #[arg(long)]
    pub truth: PathBuf,
    /// Uniform probe spacing, meters.
    #[arg(long, default_value_t = 0.3)]
    pub probe_step: f64,
    /// Fraction of worst probes excluded from the statistics.
    #[arg(long, default_value_t = 1e-4)]
    pub trim: f64,
    /// Emit a z-plane cross-section (distance + gradient magnitude) as CSV.
    #[arg(long)]
    pub slice_z: Option<f64>,
    #[arg(long)]
    pub slice_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub slice_step: f64,
    /// Write the metrics row as CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum SetupKind {
    /// IMU prediction provides the prior and scans are deskewed.
    Inertial,
    /// Previous optimized pose is the prior; no IMU required.
    Noimu,
    /// Inertial prior perturbed by seeded noise (--sigma-t / --sigma-yaw).
    Noise,
}

#[derive(Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Scan list file: one "stamp sweep_period path" per line.
    #[arg(long)]
    pub scans: PathBuf,
    /// IMU stream: "t ax ay az gx gy gz" per line.
    #[arg(long)]
    pub imu: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub setup: SetupKind,
    /// Prior position noise for --setup noise, meters.
    #[arg(long, default_value_t = 0.5)]
    pub sigma_t: f64,
    /// Prior yaw noise for --setup noise, radians.
    #[arg(long, default_value_t = 0.1)]
    pub sigma_yaw: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output trajectory (TUM format).
    #[arg(long, default_value = "trajectory.tum")]
    pub out: PathBuf,
    /// Per-scan timing CSV.
    #[arg(long)]
    pub timing_out: Option<PathBuf>,
    /// Ground-truth trajectory (TUM); enables RMSE reporting.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Initial pose "x,y,z,qx,qy,qz,qw" (default: first truth sample,
    /// else identity).
    #[arg(long)]
    pub initial: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scan downsampling resolution, meters.
    #[arg(long)]
    pub scan_voxel_size: Option<f64>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Build(args) => commands::cmd_build(args),
        Command::Query(args) => commands::cmd_query(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Localize(args) => commands::cmd_localize(args),
        Command::Bench(args) => commands::cmd_bench(&args.map, args.queries, args.seed, args.out.as_ref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                GedfError::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
