//! Synthetic scenes: analytic primitives with exact unsigned distance,
//! seeded surface sampling, and a lidar simulator with optional motion
//! distortion.
//!
//! Scene files are one primitive per line:
//!
//! ```text
//! # comment
//! sphere cx cy cz radius
//! box cx cy cz sx sy sz          # hollow axis-aligned box (surface only)
//! rect axis offset umin vmin umax vmax   # axis in {x,y,z}; plane axis=offset
//! cylinder cx cy base_z radius height    # z-aligned lateral surface
//! ```

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::Scan;
use crate::error::{GedfError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Spherical shell.
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Surface of an axis-aligned box with full side lengths `size`.
    Box { center: Vector3<f64>, size: Vector3<f64> },
    /// Axis-aligned rectangular patch on the plane `axis = offset`; `u, v`
    /// are the remaining two axes in xyz order.
    Rect { axis: usize, offset: f64, umin: f64, vmin: f64, umax: f64, vmax: f64 },
    /// Lateral surface of a z-aligned cylinder (no caps).
    Cylinder { center_xy: [f64; 2], base_z: f64, radius: f64, height: f64 },
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

impl Primitive {
    /// Exact unsigned distance from `x` to the primitive's surface.
    pub fn distance(&self, x: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => ((x - center).norm() - radius).abs(),
            Primitive::Box { center, size } => {
                let h = size * 0.5;
                let q = x - center;
                // signed distance of a solid box, then |.| for the shell
                let d = Vector3::new(q.x.abs() - h.x, q.y.abs() - h.y, q.z.abs() - h.z);
                let outside = Vector3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0)).norm();
                let inside = d.x.max(d.y).max(d.z).min(0.0);
                (outside + inside).abs()
            }
            Primitive::Rect { axis, offset, umin, vmin, umax, vmax } => {
                let (u_axis, v_axis) = other_axes(*axis);
                let du = x[u_axis] - clamp(x[u_axis], *umin, *umax);
                let dv = x[v_axis] - clamp(x[v_axis], *vmin, *vmax);
                let dn = x[*axis] - offset;
                (du * du + dv * dv + dn * dn).sqrt()
            }
            Primitive::Cylinder { center_xy, base_z, radius, height } => {
                let dx = x.x - center_xy[0];
                let dy = x.y - center_xy[1];
                // nearest lateral point shares the query's azimuth, so the
                // problem reduces to 2D: radial offset vs out-of-band height
                let dr = (dx * dx + dy * dy).sqrt() - radius;
                let dz = x.z - clamp(x.z, *base_z, base_z + height);
                (dr * dr + dz * dz).sqrt()
            }
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Box { size, .. } => {
                2.0 * (size.x * size.y + size.y * size.z + size.x * size.z)
            }
            Primitive::Rect { umin, vmin, umax, vmax, .. } => (umax - umin) * (vmax - vmin),
            Primitive::Cylinder { radius, height, .. } => 2.0 * PI * radius * height,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        match self {
            Primitive::Sphere { center, radius } => {
                // uniform on the sphere via z + azimuth
                let z: f64 = rng.random_range(-1.0..=1.0);
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).max(0.0).sqrt();
                center + Vector3::new(r * phi.cos(), r * phi.sin(), z) * *radius
            }
            Primitive::Box { center, size } => {
                let h = size * 0.5;
                let areas = [
                    size.y * size.z, // +-x faces
                    size.x * size.z,
                    size.x * size.y,
                ];
                let total = 2.0 * (areas[0] + areas[1] + areas[2]);
                let mut pick = rng.random_range(0.0..total);
                let mut face = 5;
                for f in 0..6 {
                    let a = areas[f / 2];
                    if pick < a {
                        face = f;
                        break;
                    }
                    pick -= a;
                }
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = *center;
                p[axis] += sign * h[axis];
                let (u, v) = other_axes(axis);
                p[u] += rng.random_range(-h[u]..=h[u]);
                p[v] += rng.random_range(-h[v]..=h[v]);
                p
            }
            Primitive::Rect { axis, offset, umin, vmin, umax, vmax } => {
                let (u_axis, v_axis) = other_axes(*axis);
                let mut p = Vector3::zeros();
                p[*axis] = *offset;
                p[u_axis] = rng.random_range(*umin..=*umax);
                p[v_axis] = rng.random_range(*vmin..=*vmax);
                p
            }
            Primitive::Cylinder { center_xy, base_z, radius, height } => {
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                let z: f64 = rng.random_range(0.0..=*height);
                Vector3::new(
                    center_xy[0] + radius * phi.cos(),
                    center_xy[1] + radius * phi.sin(),
                    base_z + z,
                )
            }
        }
    }

    // Smallest positive t with origin + t*dir on the surface, if any.
    fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<f64> {
        const EPS: f64 = 1e-12;
        let mut best: Option<f64> = None;
        let mut consider = |t: f64| {
            if t > EPS && t <= max_range && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        };
        match self {
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc >= 0.0 {
                    let s = disc.sqrt();
                    consider(-b - s);
                    consider(-b + s);
                }
            }
            Primitive::Box { center, size } => {
                let h = size * 0.5;
                for axis in 0..3 {
                    for sign in [-1.0, 1.0] {
                        let plane = center[axis] + sign * h[axis];
                        if dir[axis].abs() < EPS {
                            continue;
                        }
                        let t = (plane - origin[axis]) / dir[axis];
                        let p = origin + dir * t;
                        let (u, v) = other_axes(axis);
                        if (p[u] - center[u]).abs() <= h[u] && (p[v] - center[v]).abs() <= h[v] {
                            consider(t);
                        }
                    }
                }
            }
            Primitive::Rect { axis, offset, umin, vmin, umax, vmax } => {
                if dir[*axis].abs() >= EPS {
                    let t = (offset - origin[*axis]) / dir[*axis];
                    let p = origin + dir * t;
                    let (u, v) = other_axes(*axis);
                    if p[u] >= *umin && p[u] <= *umax && p[v] >= *vmin && p[v] <= *vmax {
                        consider(t);
                    }
                }
            }
            Primitive::Cylinder { center_xy, base_z, radius, height } => {
                let ox = origin.x - center_xy[0];
                let oy = origin.y - center_xy[1];
                let a = dir.x * dir.x + dir.y * dir.y;
                if a >= EPS {
                    let b = ox * dir.x + oy * dir.y;
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            let z = origin.z + dir.z * t;
                            if z >= *base_z && z <= base_z + height {
                                consider(t);
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

#[derive(Debug, Clone, Default)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    /// Parses the one-primitive-per-line scene format; see the module docs.
    pub fn parse(text: &str) -> Result<Scene> {
        let mut primitives = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let nums = |expected: usize| -> Result<Vec<f64>> {
                if toks.len() - 1 != expected {
                    return Err(GedfError::Parse {
                        line: lineno,
                        msg: format!(
                            "{} takes {} parameters, got {}",
                            toks[0],
                            expected,
                            toks.len() - 1
                        ),
                    });
                }
                toks[1..]
                    .iter()
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| GedfError::Parse {
                            line: lineno,
                            msg: format!("bad number {:?}", t),
                        })
                    })
                    .collect()
            };
            let prim = match toks[0] {
                "sphere" => {
                    let p = nums(4)?;
                    if p[3] <= 0.0 {
                        return Err(GedfError::Parse {
                            line: lineno,
                            msg: "sphere radius must be positive".into(),
                        });
                    }
                    Primitive::Sphere {
                        center: Vector3::new(p[0], p[1], p[2]),
                        radius: p[3],
                    }
                }
                "box" => {
                    let p = nums(6)?;
                    if p[3] <= 0.0 || p[4] <= 0.0 || p[5] <= 0.0 {
                        return Err(GedfError::Parse {
                            line: lineno,
                            msg: "box sides must be positive".into(),
                        });
                    }
                    Primitive::Box {
                        center: Vector3::new(p[0], p[1], p[2]),
                        size: Vector3::new(p[3], p[4], p[5]),
                    }
                }
                "rect" => {
                    if toks.len() != 7 {
                        return Err(GedfError::Parse {
                            line: lineno,
                            msg: "rect takes axis + 5 numbers".into(),
                        });
                    }
                    let axis = match toks[1] {
                        "x" => 0,
                        "y" => 1,
                        "z" => 2,
                        other => {
                            return Err(GedfError::Parse {
                                line: lineno,
                                msg: format!("rect axis must be x, y or z, got {:?}", other),
                            })
                        }
                    };
                    let mut p = [0.0f64; 5];
                    for (j, t) in toks[2..].iter().enumerate() {
                        p[j] = t.parse().map_err(|_| GedfError::Parse {
                            line: lineno,
                            msg: format!("bad number {:?}", t),
                        })?;
                    }
                    if p[3] <= p[1] || p[4] <= p[2] {
                        return Err(GedfError::Parse {
                            line: lineno,
                            msg: "rect extents must satisfy umax > umin, vmax > vmin".into(),
                        });
                    }
                    Primitive::Rect {
                        axis,
                        offset: p[0],
                        umin: p[1],
                        vmin: p[2],
                        umax: p[3],
                        vmax: p[4],
                    }
                }
                "cylinder" => {
                    let p = nums(5)?;
                    if p[3] <= 0.0 || p[4] <= 0.0 {
                        return Err(GedfError::Parse {
                            line: lineno,
                            msg: "cylinder radius and height must be positive".into(),
                        });
                    }
                    Primitive::Cylinder {
                        center_xy: [p[0], p[1]],
                        base_z: p[2],
                        radius: p[3],
                        height: p[4],
                    }
                }
                other => {
                    return Err(GedfError::Parse {
                        line: lineno,
                        msg: format!("unknown primitive {:?}", other),
                    })
                }
            };
            primitives.push(prim);
        }
        if primitives.is_empty() {
            return Err(GedfError::Input("scene has no primitives".into()));
        }
        Ok(Scene { primitives })
    }

    /// Exact unsigned distance to the nearest primitive surface.
    pub fn distance(&self, x: &Vector3<f64>) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.distance(x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Draws `ceil(area * density)` surface points per primitive with a
    /// seeded generator; identical inputs give identical clouds.
    pub fn sample_surface(&self, density: f64, seed: u64) -> Vec<Vector3<f64>> {
        assert!(density > 0.0, "density must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for prim in &self.primitives {
            let n = (prim.area() * density).ceil() as usize;
            for _ in 0..n {
                out.push(prim.sample(&mut rng));
            }
        }
        out
    }

    /// Nearest hit over all primitives.
    pub fn raycast(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_range: f64,
    ) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|p| p.raycast(origin, dir, max_range))
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }
}

/// Spinning-lidar directions in the sensor frame: `rings` elevation rows
/// spanning `±vertical_fov/2`, `azimuths` columns over 360°. Azimuth-major
/// order (all rings of a column before the next column) so per-point times
/// are nondecreasing within a sweep.
pub fn lidar_ray_pattern(rings: usize, azimuths: usize, vertical_fov: f64) -> Vec<Vector3<f64>> {
    assert!(rings >= 1 && azimuths >= 1);
    let mut dirs = Vec::with_capacity(rings * azimuths);
    for a in 0..azimuths {
        let az = 2.0 * PI * (a as f64) / (azimuths as f64);
        for r in 0..rings {
            let el = if rings == 1 {
                0.0
            } else {
                -vertical_fov / 2.0 + vertical_fov * (r as f64) / ((rings - 1) as f64)
            };
            dirs.push(Vector3::new(
                el.cos() * az.cos(),
                el.cos() * az.sin(),
                el.sin(),
            ));
        }
    }
    dirs
}

/// World-frame rigid pose of the sensor.
pub type PoseFn<'a> = &'a (dyn Fn(f64) -> (Vector3<f64>, UnitQuaternion<f64>) + Sync);

/// Casts every ray of `pattern` against the scene from the pose at `stamp`.
/// With `distort`, each hit is re-expressed in the sensor frame of its
/// emission pose `pose_fn(stamp + rel_time * sweep_period)` — the skew a
/// moving sensor records — so deskewing with the true pose history recovers
/// the undistorted scan exactly. `noise_sigma > 0` adds seeded Gaussian
/// range noise.
#[allow(clippy::too_many_arguments)]
pub fn simulate_scan(
    scene: &Scene,
    pose_fn: PoseFn,
    stamp: f64,
    sweep_period: f64,
    pattern: &[Vector3<f64>],
    distort: bool,
    max_range: f64,
    noise_sigma: f64,
    seed: u64,
) -> Scan {
    assert!(!pattern.is_empty(), "ray pattern must be nonempty");
    let n = pattern.len();
    let (pos0, rot0) = pose_fn(stamp);
    let hits: Vec<Option<(Vector3<f64>, f64)>> = pattern
        .par_iter()
        .enumerate()
        .map(|(i, dir)| {
            let rel = i as f64 / n as f64;
            let range = scene.raycast(&pos0, &(rot0 * dir), max_range)?;
            let p = if distort {
                let world = pos0 + (rot0 * dir) * range;
                let (pos_e, rot_e) = pose_fn(stamp + rel * sweep_period);
                rot_e.inverse() * (world - pos_e)
            } else {
                dir * range
            };
            Some((p, rel))
        })
        .collect();

    let mut points = Vec::new();
    let mut rel_times = Vec::new();
    for h in hits.into_iter().flatten() {
        points.push(h.0);
        rel_times.push(h.1);
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut points {
            let r = p.norm();
            if r > 0.0 {
                let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let g = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
                *p *= (r + noise_sigma * g).max(0.0) / r;
            }
        }
    }
    Scan { points, rel_times, stamp, sweep_period }
}

/// Constant-rate horizontal circle with the heading locked to the tangent;
/// closed forms for pose and ideal IMU output make it a convenient truth
/// trajectory for localization runs.
#[derive(Debug, Clone, Copy)]
pub struct CircleTrajectory {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub angular_rate: f64,
}

impl CircleTrajectory {
    pub fn pose(&self, t: f64) -> (Vector3<f64>, UnitQuaternion<f64>) {
        let a = self.angular_rate * t;
        let p = self.center + Vector3::new(a.cos(), a.sin(), 0.0) * self.radius;
        let yaw = a + PI / 2.0;
        (p, UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw))
    }

    /// Ideal specific force and angular rate in the body frame at time `t`
    /// for the given gravity vector.
    pub fn imu(&self, t: f64, gravity: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let a = self.angular_rate * t;
        let accel_world =
            -Vector3::new(a.cos(), a.sin(), 0.0) * (self.radius * self.angular_rate.powi(2));
        let (_, q) = self.pose(t);
        let specific_force = q.inverse() * (accel_world - gravity);
        (specific_force, Vector3::new(0.0, 0.0, self.angular_rate))
    }
}
