//! 15-DoF error-state Kalman filter over [δp, δv, δθ, δb_a, δb_g], with
//! pose interpolation and scan deskewing on the state history.

use std::io::BufRead;
use std::path::Path;

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};

use crate::cloud::{Scan, TrajectorySample};
use crate::error::{GedfError, Result};

type Mat15 = SMatrix<f64, 15, 15>;
type Mat6 = SMatrix<f64, 6, 6>;
type Mat6x15 = SMatrix<f64, 6, 15>;

/// Nominal (full-precision) filter state; the orientation error lives in a
/// local body-frame tangent, injected as `q <- q * exp(delta_theta)`.
#[derive(Debug, Clone)]
pub struct NominalState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub ba: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub stamp: f64,
}

impl NominalState {
    pub fn at_rest(stamp: f64) -> Self {
        Self {
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            ba: Vector3::zeros(),
            bg: Vector3::zeros(),
            stamp,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    pub stamp: f64,
    /// Specific force, body frame, m/s^2.
    pub accel: Vector3<f64>,
    /// Angular rate, body frame, rad/s.
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct EskfConfig {
    /// Accelerometer white-noise density, (m/s^2)/sqrt(Hz) squared per dt.
    pub accel_noise: f64,
    pub gyro_noise: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,
    pub gravity: Vector3<f64>,
    /// Mahalanobis gate on the 6-DoF pose innovation; chi-square 0.999
    /// quantile with 6 degrees of freedom.
    pub innovation_gate: f64,
    /// Default pose-measurement noise when the caller does not supply one.
    pub meas_sigma_p: f64,
    pub meas_sigma_theta: f64,
}

impl Default for EskfConfig {
    fn default() -> Self {
        Self {
            accel_noise: 1e-2,
            gyro_noise: 1e-3,
            accel_bias_walk: 1e-4,
            gyro_bias_walk: 1e-5,
            gravity: Vector3::new(0.0, 0.0, -9.81),
            innovation_gate: 22.457,
            meas_sigma_p: 0.05,
            meas_sigma_theta: 0.01,
        }
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[derive(Debug, Clone)]
pub struct Eskf {
    pub state: NominalState,
    pub cov: Mat15,
    pub config: EskfConfig,
}

impl Eskf {
    pub fn new(state: NominalState, initial_sigma: f64, config: EskfConfig) -> Self {
        Self { state, cov: Mat15::identity() * initial_sigma * initial_sigma, config }
    }

    pub fn default_measurement_covariance(&self) -> Mat6 {
        let mut r = Mat6::zeros();
        for i in 0..3 {
            r[(i, i)] = self.config.meas_sigma_p.powi(2);
            r[(i + 3, i + 3)] = self.config.meas_sigma_theta.powi(2);
        }
        r
    }

    /// Integrates one IMU sample: nominal state by first-order kinematics
    /// with the midpoint 1/2*a*dt^2 position term, covariance by the
    /// discretized error-state Jacobian.
    pub fn predict(&mut self, imu: &ImuSample) -> Result<()> {
        let dt = imu.stamp - self.state.stamp;
        if dt <= 0.0 {
            return Err(GedfError::Input(format!(
                "IMU stamp {} not after state stamp {}",
                imu.stamp, self.state.stamp
            )));
        }
        let a = imu.accel - self.state.ba;
        let w = imu.gyro - self.state.bg;
        let rot = self.state.q.to_rotation_matrix();
        let acc_world = rot * a + self.config.gravity;

        self.state.p += self.state.v * dt + acc_world * (0.5 * dt * dt);
        self.state.v += acc_world * dt;
        self.state.q *= UnitQuaternion::from_scaled_axis(w * dt);
        self.state.q.renormalize();
        self.state.stamp = imu.stamp;

        let mut f = Mat15::identity();
        let i3 = Matrix3::identity();
        let r = rot.matrix();
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(i3 * dt));
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-(r * skew(&a)) * dt));
        f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-r * dt));
        let dtheta = UnitQuaternion::from_scaled_axis(-w * dt);
        f.fixed_view_mut::<3, 3>(6, 6)
            .copy_from(dtheta.to_rotation_matrix().matrix());
        f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-i3 * dt));

        let mut q = Mat15::zeros();
        for i in 0..3 {
            q[(3 + i, 3 + i)] = self.config.accel_noise.powi(2) * dt;
            q[(6 + i, 6 + i)] = self.config.gyro_noise.powi(2) * dt;
            q[(9 + i, 9 + i)] = self.config.accel_bias_walk.powi(2) * dt;
            q[(12 + i, 12 + i)] = self.config.gyro_bias_walk.powi(2) * dt;
        }
        self.cov = f * self.cov * f.transpose() + q;
        self.symmetrize();
        Ok(())
    }

    /// Absorbs a 6-DoF pose measurement. Returns `Ok(false)` without
    /// touching the state when the innovation fails the Mahalanobis gate.
    pub fn update_pose(
        &mut self,
        meas_p: &Vector3<f64>,
        meas_q: &UnitQuaternion<f64>,
        meas_cov: &Mat6,
    ) -> Result<bool> {
        let dq = self.state.q.inverse() * meas_q;
        let mut y = SVector::<f64, 6>::zeros();
        y.fixed_rows_mut::<3>(0).copy_from(&(meas_p - self.state.p));
        y.fixed_rows_mut::<3>(3).copy_from(&dq.scaled_axis());

        let mut h = Mat6x15::zeros();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        h.fixed_view_mut::<3, 3>(3, 6).copy_from(&Matrix3::identity());

        let s = h * self.cov * h.transpose() + meas_cov;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| GedfError::Numerical("singular innovation covariance".into()))?;
        let maha = (y.transpose() * s_inv * y)[(0, 0)];
        if maha > self.config.innovation_gate {
            return Ok(false);
        }

        let k = self.cov * h.transpose() * s_inv;
        let dx = k * y;
        let ikh = Mat15::identity() - k * h;
        self.cov = ikh * self.cov * ikh.transpose() + k * meas_cov * k.transpose();
        self.symmetrize();

        self.state.p += dx.fixed_rows::<3>(0);
        self.state.v += dx.fixed_rows::<3>(3);
        self.state.q *= UnitQuaternion::from_scaled_axis(dx.fixed_rows::<3>(6).into_owned());
        self.state.q.renormalize();
        self.state.ba += dx.fixed_rows::<3>(9);
        self.state.bg += dx.fixed_rows::<3>(12);
        Ok(true)
    }

    pub fn trajectory_sample(&self) -> TrajectorySample {
        TrajectorySample {
            stamp: self.state.stamp,
            position: self.state.p,
            orientation: self.state.q,
        }
    }

    fn symmetrize(&mut self) {
        self.cov = (self.cov + self.cov.transpose()) * 0.5;
    }
}

/// Interpolated pose at `t`: linear in position, slerp in orientation.
/// The boolean is true when `t` fell outside the history and was clamped.
pub fn pose_at(
    history: &[TrajectorySample],
    t: f64,
) -> Result<(Vector3<f64>, UnitQuaternion<f64>, bool)> {
    if history.is_empty() {
        return Err(GedfError::Input("empty pose history".into()));
    }
    let first = &history[0];
    let last = &history[history.len() - 1];
    if t <= first.stamp {
        return Ok((first.position, first.orientation, t < first.stamp));
    }
    if t >= last.stamp {
        return Ok((last.position, last.orientation, t > last.stamp));
    }
    let hi = history.partition_point(|s| s.stamp < t);
    let a = &history[hi - 1];
    let b = &history[hi];
    let alpha = (t - a.stamp) / (b.stamp - a.stamp);
    let p = a.position + (b.position - a.position) * alpha;
    let q = a.orientation.slerp(&b.orientation, alpha);
    Ok((p, q, false))
}

/// Motion-compensates a sweep: each point is re-expressed in the sensor
/// frame at `target_time`, using the emission pose from the history at
/// `stamp + rel_time * sweep_period`.
pub fn deskew(scan: &Scan, history: &[TrajectorySample], target_time: f64) -> Result<Vec<Vector3<f64>>> {
    let (tp, tq, _) = pose_at(history, target_time)?;
    let tq_inv = tq.inverse();
    let mut out = Vec::with_capacity(scan.points.len());
    for (p, rel) in scan.points.iter().zip(scan.rel_times.iter()) {
        let (ep, eq, _) = pose_at(history, scan.stamp + rel * scan.sweep_period)?;
        out.push(tq_inv * (eq * p + ep - tp));
    }
    Ok(out)
}

/// Loads an IMU stream from text lines `stamp ax ay az gx gy gz` (SI units,
/// `#` comments allowed). Stamps must strictly increase.
pub fn load_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out: Vec<ImuSample> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let lineno = i + 1;
        let toks: Vec<&str> = t.split_whitespace().collect();
        if toks.len() != 7 {
            return Err(GedfError::Parse {
                line: lineno,
                msg: format!("expected 7 fields (t ax ay az gx gy gz), got {}", toks.len()),
            });
        }
        let mut f = [0.0f64; 7];
        for (j, tok) in toks.iter().enumerate() {
            f[j] = tok.parse().map_err(|_| GedfError::Parse {
                line: lineno,
                msg: format!("bad number {:?}", tok),
            })?;
        }
        if let Some(prev) = out.last() {
            if f[0] <= prev.stamp {
                return Err(GedfError::Parse {
                    line: lineno,
                    msg: format!("IMU stamp {} does not increase past {}", f[0], prev.stamp),
                });
            }
        }
        out.push(ImuSample {
            stamp: f[0],
            accel: Vector3::new(f[1], f[2], f[3]),
            gyro: Vector3::new(f[4], f[5], f[6]),
        });
    }
    Ok(out)
}
