//! Layered TOML configuration. Every key is optional; unset keys fall back
//! to the library defaults, and command-line flags override the file.

use std::path::Path;

use gedf::eskf::EskfConfig;
use gedf::fit::FitConfig;
use gedf::map::MapConfig;
use gedf::registration::{LocalizationConfig, RegistrationConfig};
use gedf::{GedfError, Result};
use nalgebra::Vector3;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub map: MapSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub registration: RegistrationSection,
    #[serde(default)]
    pub eskf: EskfSection,
    #[serde(default)]
    pub localization: LocalizationSection,
    #[serde(default)]
    pub build: BuildSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSection {
    pub block_size: Option<f64>,
    pub overlap_margin: Option<f64>,
    pub activation_distance: Option<f64>,
    pub edt_voxel_size: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub mae_tolerance: Option<f64>,
    pub max_kernels: Option<usize>,
    pub kernel_increment: Option<usize>,
    pub initial_kernels: Option<usize>,
    pub initial_kernels_empty: Option<usize>,
    pub max_lm_iterations: Option<usize>,
    pub lm_initial_damping: Option<f64>,
    pub min_length_scale: Option<f64>,
    pub max_length_scale: Option<f64>,
    pub negative_seed_weight: Option<f64>,
    pub prune_weight: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationSection {
    pub coarse_cauchy_scale: Option<f64>,
    pub fine_cauchy_scale: Option<f64>,
    pub max_iterations: Option<usize>,
    pub min_valid_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EskfSection {
    pub accel_noise: Option<f64>,
    pub gyro_noise: Option<f64>,
    pub accel_bias_walk: Option<f64>,
    pub gyro_bias_walk: Option<f64>,
    pub gravity: Option<[f64; 3]>,
    pub innovation_gate: Option<f64>,
    pub meas_sigma_p: Option<f64>,
    pub meas_sigma_theta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationSection {
    pub scan_voxel_size: Option<f64>,
    pub initial_sigma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildSection {
    /// Surface sampling density (points per square meter) for scene specs.
    pub density: Option<f64>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    GedfError::Input(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| GedfError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn map_config(&self) -> MapConfig {
        let mut c = MapConfig::default();
        let m = &self.map;
        set(&mut c.block_size, m.block_size);
        set(&mut c.overlap_margin, m.overlap_margin);
        set(&mut c.activation_distance, m.activation_distance);
        set(&mut c.edt_voxel_size, m.edt_voxel_size);
        c.fit = self.fit_config();
        c
    }

    pub fn fit_config(&self) -> FitConfig {
        let mut c = FitConfig::default();
        let f = &self.fit;
        set(&mut c.mae_tolerance, f.mae_tolerance);
        set(&mut c.max_kernels, f.max_kernels);
        set(&mut c.kernel_increment, f.kernel_increment);
        set(&mut c.initial_kernels, f.initial_kernels);
        set(&mut c.initial_kernels_empty, f.initial_kernels_empty);
        set(&mut c.max_lm_iterations, f.max_lm_iterations);
        set(&mut c.lm_initial_damping, f.lm_initial_damping);
        set(&mut c.min_length_scale, f.min_length_scale);
        set(&mut c.max_length_scale, f.max_length_scale);
        set(&mut c.negative_seed_weight, f.negative_seed_weight);
        set(&mut c.prune_weight, f.prune_weight);
        c
    }

    pub fn registration_config(&self) -> RegistrationConfig {
        let mut c = RegistrationConfig::default();
        let r = &self.registration;
        set(&mut c.coarse_cauchy_scale, r.coarse_cauchy_scale);
        set(&mut c.fine_cauchy_scale, r.fine_cauchy_scale);
        set(&mut c.max_iterations, r.max_iterations);
        set(&mut c.min_valid_fraction, r.min_valid_fraction);
        c
    }

    pub fn eskf_config(&self) -> EskfConfig {
        let mut c = EskfConfig::default();
        let e = &self.eskf;
        set(&mut c.accel_noise, e.accel_noise);
        set(&mut c.gyro_noise, e.gyro_noise);
        set(&mut c.accel_bias_walk, e.accel_bias_walk);
        set(&mut c.gyro_bias_walk, e.gyro_bias_walk);
        if let Some(g) = e.gravity {
            c.gravity = Vector3::new(g[0], g[1], g[2]);
        }
        set(&mut c.innovation_gate, e.innovation_gate);
        set(&mut c.meas_sigma_p, e.meas_sigma_p);
        set(&mut c.meas_sigma_theta, e.meas_sigma_theta);
        c
    }

    pub fn localization_config(&self) -> LocalizationConfig {
        let mut c = LocalizationConfig {
            registration: self.registration_config(),
            eskf: self.eskf_config(),
            ..LocalizationConfig::default()
        };
        let l = &self.localization;
        set(&mut c.scan_voxel_size, l.scan_voxel_size);
        set(&mut c.initial_sigma, l.initial_sigma);
        c
    }
}

fn set<T: Copy>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

/// Resolved-config snapshots for the run manifest.
pub mod snapshot {
    use super::*;
    use serde_json::{json, Value};

    pub fn map(c: &MapConfig) -> Value {
        json!({
            "block_size": c.block_size,
            "overlap_margin": c.overlap_margin,
            "activation_distance": c.activation_distance,
            "edt_voxel_size": c.edt_voxel_size,
            "fit": fit(&c.fit),
        })
    }

    pub fn fit(c: &FitConfig) -> Value {
        json!({
            "mae_tolerance": c.mae_tolerance,
            "max_kernels": c.max_kernels,
            "kernel_increment": c.kernel_increment,
            "initial_kernels": c.initial_kernels,
            "initial_kernels_empty": c.initial_kernels_empty,
            "max_lm_iterations": c.max_lm_iterations,
            "lm_initial_damping": c.lm_initial_damping,
            "min_length_scale": c.min_length_scale,
            "max_length_scale": c.max_length_scale,
            "negative_seed_weight": c.negative_seed_weight,
            "prune_weight": c.prune_weight,
        })
    }

    pub fn registration(c: &RegistrationConfig) -> Value {
        json!({
            "coarse_cauchy_scale": c.coarse_cauchy_scale,
            "fine_cauchy_scale": c.fine_cauchy_scale,
            "max_iterations": c.max_iterations,
            "min_valid_fraction": c.min_valid_fraction,
        })
    }

    pub fn eskf(c: &EskfConfig) -> Value {
        json!({
            "accel_noise": c.accel_noise,
            "gyro_noise": c.gyro_noise,
            "accel_bias_walk": c.accel_bias_walk,
            "gyro_bias_walk": c.gyro_bias_walk,
            "gravity": [c.gravity.x, c.gravity.y, c.gravity.z],
            "innovation_gate": c.innovation_gate,
            "meas_sigma_p": c.meas_sigma_p,
            "meas_sigma_theta": c.meas_sigma_theta,
        })
    }

    pub fn localization(c: &LocalizationConfig) -> Value {
        json!({
            "registration": registration(&c.registration),
            "eskf": eskf(&c.eskf),
            "scan_voxel_size": c.scan_voxel_size,
            "initial_sigma": c.initial_sigma,
        })
    }
}
