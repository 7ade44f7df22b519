//! Command implementations. Each command prints its human-readable summary
//! to stdout, writes any data artifacts, and records a run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gedf::cloud::{load_cloud, load_trajectory, save_trajectory, Scan};
use gedf::eskf::load_imu;
use gedf::map::{build_map, eval_reconstruction};
use gedf::registration::{
    run_localization, trajectory_rmse, LocalizationSetup, Pose6D,
};
use gedf::scene::Scene;
use gedf::serialize::{load_map, save_map};
use gedf::{GedfError, Result};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{snapshot, ConfigFile};
use crate::manifest::RunManifest;
use crate::{BuildArgs, EvalArgs, LocalizeArgs, QueryArgs, SetupKind};

fn require_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(GedfError::Input(format!("input not found: {}", path.display())));
    }
    Ok(())
}

// ------------------------------------------------------------------ build

pub fn cmd_build(args: &BuildArgs) -> Result<()> {
    let cfg_file = ConfigFile::load(args.config.as_deref())?;
    let mut map_cfg = cfg_file.map_config();
    if let Some(v) = args.block_size {
        map_cfg.block_size = v;
    }
    if let Some(v) = args.overlap_margin {
        map_cfg.overlap_margin = v;
    }
    if let Some(v) = args.activation_distance {
        map_cfg.activation_distance = v;
    }
    if let Some(v) = args.voxel_size {
        map_cfg.edt_voxel_size = v;
    }
    if let Some(v) = args.mae_tolerance {
        map_cfg.fit.mae_tolerance = v;
    }
    map_cfg.validate()?;
    let density = args.density.or(cfg_file.build.density).unwrap_or(200.0);

    let input = args.cloud().as_ref().or(args.scene().as_ref()).unwrap();
    require_exists(input)?;
    let points = if args.scene().is_some() {
        let text = std::fs::read_to_string(input)?;
        let scene = Scene::parse(&text)?;
        scene.sample_surface(density, args.seed)
    } else {
        load_cloud(input)?
    };

    let start = Instant::now();
    let map = build_map(&points, &map_cfg)?;
    let build_ms = start.elapsed().as_secs_f64() * 1e3;
    let bytes = save_map(&map, &args.out)?;

    println!(
        "blocks {}\nkernels {}\nglobal_mae {:.6}\nbytes {}\nbuild_ms {:.1}",
        map.block_count(),
        map.kernel_count(),
        map.global_mae,
        bytes,
        build_ms
    );

    let config = json!({
        "map": snapshot::map(&map_cfg),
        "density": density,
        "source": if args.scene().is_some() { "scene" } else { "cloud" },
    });
    let mut manifest = RunManifest::new("build", args.seed, config);
    manifest.add_input(input)?;
    if let Some(c) = &args.config {
        manifest.add_input(c)?;
    }
    manifest.add_output(&args.out)?;
    manifest.add_timing("build", build_ms);
    manifest.write_beside(&args.out)
}

// ------------------------------------------------------------------ query

fn parse_xyz(text: &str) -> Result<Vector3<f64>> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(GedfError::Input(format!("expected x,y,z but got '{text}'")));
    }
    let mut v = Vector3::zeros();
    for (i, p) in parts.iter().enumerate() {
        v[i] = p
            .parse::<f64>()
            .map_err(|_| GedfError::Input(format!("bad coordinate '{p}' in '{text}'")))?;
    }
    Ok(v)
}

fn load_points_file(path: &Path) -> Result<Vec<Vector3<f64>>> {
    require_exists(path)?;
    load_cloud(path)
}

pub fn cmd_query(args: &QueryArgs) -> Result<()> {
    require_exists(&args.map)?;
    let map = load_map(&args.map)?;
    let points = match (&args.point, &args.points) {
        (Some(p), None) => vec![parse_xyz(p)?],
        (None, Some(f)) => load_points_file(f)?,
        _ => unreachable!("clap enforces exactly one point source"),
    };
    let samples = map.query_batch(&points);
    let mut csv = String::from("x,y,z,d,gx,gy,gz,valid\n");
    for (p, s) in points.iter().zip(samples.iter()) {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.x,
            p.y,
            p.z,
            s.value,
            s.gradient.x,
            s.gradient.y,
            s.gradient.z,
            s.valid as u8
        ));
    }
    let config = json!({ "count": points.len() });
    let mut manifest = RunManifest::new("query", args.seed, config);
    manifest.add_input(&args.map)?;
    if let Some(f) = &args.points {
        manifest.add_input(f)?;
    }
    match &args.out {
        Some(out) => {
            std::fs::write(out, csv)?;
            manifest.add_output(out)?;
            manifest.write_beside(out)
        }
        None => {
            print!("{csv}");
            manifest.write_beside(&args.map.with_extension("query"))
        }
    }
}

// ------------------------------------------------------------------- eval

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    require_exists(&args.map)?;
    require_exists(&args.truth)?;
    let map = load_map(&args.map)?;
    let truth = load_cloud(&args.truth)?;
    let start = Instant::now();
    let metrics = eval_reconstruction(&map, &truth, args.probe_step, args.trim)?;
    let eval_ms = start.elapsed().as_secs_f64() * 1e3;
    println!(
        "metric value\nmae {:.6}\nmedian {:.6}\nstd {:.6}\ngrad_mean {:.6}\ngrad_std {:.6}\nprobes {}",
        metrics.mae,
        metrics.median,
        metrics.std,
        metrics.grad_mean,
        metrics.grad_std,
        metrics.probe_count
    );

    let config = json!({ "probe_step": args.probe_step, "trim": args.trim, "slice_z": args.slice_z });
    let mut manifest = RunManifest::new("eval", args.seed, config);
    manifest.add_input(&args.map)?;
    manifest.add_input(&args.truth)?;
    manifest.add_timing("eval", eval_ms);

    if let Some(z) = args.slice_z {
        let out = args.slice_out.clone().ok_or_else(|| {
            GedfError::Config("--slice-z requires --slice-out".into())
        })?;
        let step = args.slice_step;
        if step <= 0.0 {
            return Err(GedfError::Config("slice step must be positive".into()));
        }
        let (lo, hi) = map.bounds;
        let mut csv = String::from("x,y,d,grad_norm,valid\n");
        let mut x = lo.x + step / 2.0;
        while x < hi.x {
            let mut y = lo.y + step / 2.0;
            while y < hi.y {
                let s = map.query(&Vector3::new(x, y, z));
                csv.push_str(&format!(
                    "{x},{y},{},{},{}\n",
                    s.value,
                    s.gradient.norm(),
                    s.valid as u8
                ));
                y += step;
            }
            x += step;
        }
        std::fs::write(&out, csv)?;
        manifest.add_output(&out)?;
    }
    match &args.out {
        Some(out) => {
            let csv = format!(
                "mae,median,std,grad_mean,grad_std,probes\n{},{},{},{},{},{}\n",
                metrics.mae,
                metrics.median,
                metrics.std,
                metrics.grad_mean,
                metrics.grad_std,
                metrics.probe_count
            );
            std::fs::write(out, csv)?;
            manifest.add_output(out)?;
            manifest.write_beside(out)
        }
        None => manifest.write_beside(&args.map.with_extension("eval")),
    }
}

// --------------------------------------------------------------- localize

/// Scan list file: one `stamp sweep_period path` entry per line, paths
/// relative to the list file. Each scan file holds `x y z [rel_time]` rows;
/// when the fourth column is absent points are assumed uniformly spread
/// over the sweep.
fn load_scan_list(path: &Path) -> Result<Vec<Scan>> {
    require_exists(path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = std::fs::read_to_string(path)?;
    let mut scans = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(GedfError::Parse {
                line: lineno + 1,
                msg: format!("expected 'stamp sweep_period path' in {}", path.display()),
            });
        }
        let stamp: f64 = toks[0].parse().map_err(|_| GedfError::Parse {
            line: lineno + 1,
            msg: format!("bad stamp '{}'", toks[0]),
        })?;
        let sweep_period: f64 = toks[1].parse().map_err(|_| GedfError::Parse {
            line: lineno + 1,
            msg: format!("bad sweep period '{}'", toks[1]),
        })?;
        scans.push(load_scan_file(&base.join(toks[2]), stamp, sweep_period)?);
    }
    if scans.is_empty() {
        return Err(GedfError::Input(format!("no scans listed in {}", path.display())));
    }
    Ok(scans)
}

fn load_scan_file(path: &Path, stamp: f64, sweep_period: f64) -> Result<Scan> {
    require_exists(path)?;
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    let mut rel_times = Vec::new();
    let mut has_rel = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| GedfError::Parse {
                line: lineno + 1,
                msg: format!("bad number in {}", path.display()),
            })?;
        if vals.len() != 3 && vals.len() != 4 {
            return Err(GedfError::Parse {
                line: lineno + 1,
                msg: format!("expected 'x y z [rel_time]' in {}", path.display()),
            });
        }
        let with_rel = vals.len() == 4;
        if *has_rel.get_or_insert(with_rel) != with_rel {
            return Err(GedfError::Parse {
                line: lineno + 1,
                msg: format!("mixed 3- and 4-column rows in {}", path.display()),
            });
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
        if with_rel {
            rel_times.push(vals[3]);
        }
    }
    if points.is_empty() {
        return Err(GedfError::Input(format!("empty scan file {}", path.display())));
    }
    if rel_times.is_empty() {
        let n = points.len();
        rel_times = (0..n).map(|i| i as f64 / n as f64).collect();
    }
    Ok(Scan { points, rel_times, stamp, sweep_period })
}

fn parse_pose(text: &str) -> Result<Pose6D> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| GedfError::Input(format!("bad pose '{text}'")))?;
    if vals.len() != 7 {
        return Err(GedfError::Input(
            "initial pose must be x,y,z,qx,qy,qz,qw".into(),
        ));
    }
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        vals[6], vals[3], vals[4], vals[5],
    ));
    Ok(Pose6D { t: Vector3::new(vals[0], vals[1], vals[2]), q })
}

pub fn cmd_localize(args: &LocalizeArgs) -> Result<()> {
    let cfg_file = ConfigFile::load(args.config.as_deref())?;
    let mut loc_cfg = cfg_file.localization_config();
    if let Some(v) = args.scan_voxel_size {
        loc_cfg.scan_voxel_size = v;
    }

    require_exists(&args.map)?;
    let map = load_map(&args.map)?;
    let scans = load_scan_list(&args.scans)?;
    let imu = match &args.imu {
        Some(p) => {
            require_exists(p)?;
            Some(load_imu(p)?)
        }
        None => None,
    };
    let truth = match &args.truth {
        Some(p) => {
            require_exists(p)?;
            Some(load_trajectory(p)?)
        }
        None => None,
    };

    let setup = match args.setup {
        SetupKind::Inertial => LocalizationSetup::Inertial,
        SetupKind::Noimu => LocalizationSetup::NoImu,
        SetupKind::Noise => LocalizationSetup::Noise {
            sigma_t: args.sigma_t,
            sigma_yaw: args.sigma_yaw,
        },
    };
    let initial = match (&args.initial, &truth) {
        (Some(text), _) => parse_pose(text)?,
        (None, Some(t)) => Pose6D { t: t[0].position, q: t[0].orientation },
        (None, None) => Pose6D::identity(),
    };

    let out = run_localization(
        &map,
        &scans,
        imu.as_deref(),
        setup,
        initial,
        args.seed,
        &loc_cfg,
    )?;
    save_trajectory(&out.trajectory, &args.out)?;
    let mean_ms = out.timings_ms.iter().sum::<f64>() / out.timings_ms.len() as f64;
    println!(
        "scans {}\nfailed {}\nmean_ms {:.2}",
        scans.len(),
        out.failed_scans.len(),
        mean_ms
    );
    if let Some(t) = &truth {
        let (p_rmse, r_rmse) = trajectory_rmse(&out.trajectory, t)?;
        println!("pos_rmse_m {p_rmse:.6}\nrot_rmse_deg {r_rmse:.6}");
    }

    let config = json!({
        "localization": snapshot::localization(&loc_cfg),
        "setup": format!("{:?}", args.setup).to_lowercase(),
        "sigma_t": args.sigma_t,
        "sigma_yaw": args.sigma_yaw,
    });
    let mut manifest = RunManifest::new("localize", args.seed, config);
    manifest.add_input(&args.map)?;
    manifest.add_input(&args.scans)?;
    for p in [&args.imu, &args.truth, &args.config].into_iter().flatten() {
        manifest.add_input(p)?;
    }
    manifest.add_output(&args.out)?;
    manifest.add_timing("mean_scan", mean_ms);

    if let Some(timing_out) = &args.timing_out {
        let mut csv = String::from("index,stamp,ms\n");
        for (i, (scan, ms)) in scans.iter().zip(out.timings_ms.iter()).enumerate() {
            csv.push_str(&format!("{i},{},{ms}\n", scan.stamp));
        }
        std::fs::write(timing_out, csv)?;
        manifest.add_output(timing_out)?;
    }
    manifest.write_beside(&args.out)
}

// ------------------------------------------------------------------ bench

pub fn cmd_bench(map_path: &Path, queries: usize, seed: u64, out: Option<&PathBuf>) -> Result<()> {
    require_exists(map_path)?;
    let map = load_map(map_path)?;
    let (lo, hi) = map.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vector3<f64>> = (0..queries)
        .map(|_| {
            Vector3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            )
        })
        .collect();
    let start = Instant::now();
    let samples = map.query_batch(&points);
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    let valid = samples.iter().filter(|s| s.valid).count();
    let qps = queries as f64 / (total_ms / 1e3);
    println!("queries {queries}\nvalid {valid}\ntotal_ms {total_ms:.2}\nqueries_per_sec {qps:.0}");

    let config = json!({ "queries": queries });
    let mut manifest = RunManifest::new("bench", seed, config);
    manifest.add_input(map_path)?;
    manifest.add_timing("batch", total_ms);
    if let Some(out) = out {
        let csv = format!("queries,valid,total_ms,queries_per_sec\n{queries},{valid},{total_ms},{qps}\n");
        std::fs::write(out, csv)?;
        manifest.add_output(out)?;
        manifest.write_beside(out)
    } else {
        manifest.write_beside(&map_path.with_extension("bench"))
    }
}
