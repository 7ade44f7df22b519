//! Point-cloud and trajectory I/O plus voxel downsampling.
//!
//! Cloud files are either ASCII PLY (only `float`/`double` x, y, z
//! properties are consumed) or whitespace-separated `x y z` lines.
//! Trajectories use the TUM format: `t x y z qx qy qz qw`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};

use crate::error::{GedfError, Result};

/// One lidar sweep. `rel_times` holds each point's emission offset within
/// the sweep as a fraction of `sweep_period`, in [0, 1).
#[derive(Debug, Clone)]
pub struct Scan {
    pub points: Vec<Vector3<f64>>,
    pub rel_times: Vec<f64>,
    /// Sweep start time, seconds.
    pub stamp: f64,
    /// Sweep duration, seconds.
    pub sweep_period: f64,
}

impl Scan {
    pub fn end_time(&self) -> f64 {
        self.stamp + self.sweep_period
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub stamp: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

/// Centroid voxel filter. Output order follows the sorted voxel keys, so the
/// result is independent of input ordering.
pub fn voxel_downsample(points: &[Vector3<f64>], voxel_size: f64) -> Vec<Vector3<f64>> {
    assert!(voxel_size > 0.0, "voxel_size must be positive");
    use std::collections::HashMap;
    let mut cells: HashMap<(i64, i64, i64), (Vector3<f64>, usize)> = HashMap::new();
    for p in points {
        let key = (
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        );
        let e = cells.entry(key).or_insert((Vector3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    let mut keys: Vec<(i64, i64, i64)> = cells.keys().copied().collect();
    keys.sort_unstable();
    keys.iter()
        .map(|k| {
            let (sum, n) = cells[k];
            sum / n as f64
        })
        .collect()
}

fn parse_xyz_line(line: &str, lineno: usize) -> Result<Vector3<f64>> {
    let mut it = line.split_whitespace();
    let mut v = Vector3::zeros();
    for j in 0..3 {
        let tok = it.next().ok_or_else(|| GedfError::Parse {
            line: lineno,
            msg: "expected three coordinates".into(),
        })?;
        v[j] = tok.parse::<f64>().map_err(|_| GedfError::Parse {
            line: lineno,
            msg: format!("bad number {:?}", tok),
        })?;
    }
    Ok(v)
}

fn load_ascii_ply(reader: impl BufRead, path_hint: &str) -> Result<Vec<Vector3<f64>>> {
    let mut lines = reader.lines().enumerate();

    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let mut format_seen = false;
    loop {
        let Some((i, line)) = lines.next() else {
            return Err(GedfError::Format(format!("{}: PLY header has no end_header", path_hint)));
        };
        let line = line?;
        let lineno = i + 1;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("ply") | Some("comment") | None => {}
            Some("format") => {
                let fmt = tok.next().unwrap_or("");
                if fmt != "ascii" {
                    return Err(GedfError::Format(format!(
                        "{}: only ascii PLY is supported, got {:?}",
                        path_hint, fmt
                    )));
                }
                format_seen = true;
            }
            Some("element") => {
                let name = tok.next().unwrap_or("");
                in_vertex_element = name == "vertex";
                if in_vertex_element {
                    let n = tok.next().ok_or_else(|| GedfError::Parse {
                        line: lineno,
                        msg: "element vertex missing count".into(),
                    })?;
                    vertex_count = Some(n.parse().map_err(|_| GedfError::Parse {
                        line: lineno,
                        msg: format!("bad vertex count {:?}", n),
                    })?);
                }
            }
            Some("property") => {
                if in_vertex_element {
                    let _ty = tok.next();
                    if let Some(name) = tok.next() {
                        props.push(name.to_string());
                    }
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(GedfError::Parse {
                    line: lineno,
                    msg: format!("unknown PLY header keyword {:?}", other),
                });
            }
        }
    }
    if !format_seen {
        return Err(GedfError::Format(format!("{}: PLY header missing format line", path_hint)));
    }
    let count = vertex_count
        .ok_or_else(|| GedfError::Format(format!("{}: PLY has no vertex element", path_hint)))?;
    let ix = props.iter().position(|p| p == "x");
    let iy = props.iter().position(|p| p == "y");
    let iz = props.iter().position(|p| p == "z");
    let (ix, iy, iz) = match (ix, iy, iz) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(GedfError::Format(format!(
                "{}: vertex element lacks x/y/z properties",
                path_hint
            )))
        }
    };

    let mut points = Vec::with_capacity(count);
    for (i, line) in lines {
        if points.len() == count {
            break;
        }
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < props.len() {
            return Err(GedfError::Parse {
                line: lineno,
                msg: format!("expected {} vertex fields, got {}", props.len(), toks.len()),
            });
        }
        let parse = |idx: usize| -> Result<f64> {
            toks[idx].parse::<f64>().map_err(|_| GedfError::Parse {
                line: lineno,
                msg: format!("bad number {:?}", toks[idx]),
            })
        };
        points.push(Vector3::new(parse(ix)?, parse(iy)?, parse(iz)?));
    }
    if points.len() != count {
        return Err(GedfError::Format(format!(
            "{}: expected {} vertices, file ended after {}",
            path_hint,
            count,
            points.len()
        )));
    }
    Ok(points)
}

/// Loads a cloud from ASCII PLY (by `.ply` extension) or plain `x y z` text.
/// Blank lines and `#` comments are skipped in the plain format.
pub fn load_cloud(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let hint = path.display().to_string();
    if path.extension().and_then(|e| e.to_str()) == Some("ply") {
        return load_ascii_ply(reader, &hint);
    }
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        points.push(parse_xyz_line(t, i + 1)?);
    }
    Ok(points)
}

/// Loads a TUM-format trajectory. Quaternions must be normalized to within
/// 1e-3 and are renormalized on the way in; timestamps must strictly
/// increase.
pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectorySample>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out: Vec<TrajectorySample> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let lineno = i + 1;
        let toks: Vec<&str> = t.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(GedfError::Parse {
                line: lineno,
                msg: format!("expected 8 fields (t x y z qx qy qz qw), got {}", toks.len()),
            });
        }
        let mut f = [0.0f64; 8];
        for (j, tok) in toks.iter().enumerate() {
            f[j] = tok.parse().map_err(|_| GedfError::Parse {
                line: lineno,
                msg: format!("bad number {:?}", tok),
            })?;
        }
        let q = nalgebra::Quaternion::new(f[7], f[4], f[5], f[6]);
        if (q.norm() - 1.0).abs() > 1e-3 {
            return Err(GedfError::Parse {
                line: lineno,
                msg: format!("quaternion norm {} deviates from 1 by more than 1e-3", q.norm()),
            });
        }
        if let Some(prev) = out.last() {
            if f[0] <= prev.stamp {
                return Err(GedfError::Parse {
                    line: lineno,
                    msg: format!("timestamp {} does not increase past {}", f[0], prev.stamp),
                });
            }
        }
        out.push(TrajectorySample {
            stamp: f[0],
            position: Vector3::new(f[1], f[2], f[3]),
            orientation: UnitQuaternion::from_quaternion(q),
        });
    }
    Ok(out)
}

pub fn save_trajectory(samples: &[TrajectorySample], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let q = s.orientation.quaternion();
        writeln!(
            f,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            s.stamp, s.position.x, s.position.y, s.position.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmpfile(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("gedf-cloud-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn downsample_single_cell_centroid() {
        let pts = vec![
            Vector3::new(0.01, 0.01, 0.01),
            Vector3::new(0.03, 0.05, 0.02),
        ];
        let out = voxel_downsample(&pts, 0.1);
        assert_eq!(out.len(), 1);
        assert!((out[0] - Vector3::new(0.02, 0.03, 0.015)).norm() < 1e-12);
    }

    #[test]
    fn downsample_is_order_independent() {
        let pts: Vec<Vector3<f64>> = (0..100)
            .map(|i| Vector3::new((i % 7) as f64 * 0.04, (i % 5) as f64 * 0.07, i as f64 * 0.011))
            .collect();
        let mut rev = pts.clone();
        rev.reverse();
        let a = voxel_downsample(&pts, 0.1);
        let b = voxel_downsample(&rev, 0.1);
        assert_eq!(a.len(), b.len());
        // same cells in the same order; centroids agree up to summation order
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).norm() < 1e-12);
        }
        // identical input => bitwise identical output
        assert_eq!(a, voxel_downsample(&pts, 0.1));
    }

    #[test]
    fn downsample_preserves_separated_points() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0)];
        assert_eq!(voxel_downsample(&pts, 0.1).len(), 2);
    }

    #[test]
    fn load_plain_xyz() {
        let path = tmpfile(
            "plain.xyz",
            "# header comment\n1.0 2.0 3.0\n\n-1 0.5 2e-1\n",
        );
        let pts = load_cloud(&path).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0], Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(pts[1], Vector3::new(-1.0, 0.5, 0.2));
    }

    #[test]
    fn plain_xyz_bad_token_reports_line() {
        let path = tmpfile("bad.xyz", "1 2 3\n1 oops 3\n");
        let err = load_cloud(&path).unwrap_err();
        match err {
            GedfError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_ply_with_extra_properties() {
        let path = tmpfile(
            "cloud.ply",
            "ply\nformat ascii 1.0\ncomment made up\nelement vertex 2\n\
             property float x\nproperty float y\nproperty float z\nproperty float intensity\n\
             end_header\n0.1 0.2 0.3 42\n1 2 3 7\n",
        );
        let pts = load_cloud(&path).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1], Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn ply_rejects_binary_format() {
        let path = tmpfile(
            "bin.ply",
            "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n",
        );
        assert!(load_cloud(&path).is_err());
    }

    #[test]
    fn ply_truncated_vertex_list_errors() {
        let path = tmpfile(
            "short.ply",
            "ply\nformat ascii 1.0\nelement vertex 3\n\
             property float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n",
        );
        assert!(load_cloud(&path).is_err());
    }

    #[test]
    fn trajectory_roundtrip() {
        let samples = vec![
            TrajectorySample {
                stamp: 0.0,
                position: Vector3::new(1.0, 2.0, 3.0),
                orientation: UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3),
            },
            TrajectorySample {
                stamp: 0.1,
                position: Vector3::new(1.5, 2.0, 3.0),
                orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, 1.0),
            },
        ];
        let dir = std::env::temp_dir().join("gedf-cloud-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.txt");
        save_trajectory(&samples, &path).unwrap();
        let loaded = load_trajectory(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in samples.iter().zip(loaded.iter()) {
            assert!((a.stamp - b.stamp).abs() < 1e-9);
            assert!((a.position - b.position).norm() < 1e-8);
            assert!(a.orientation.angle_to(&b.orientation) < 1e-7);
        }
    }

    #[test]
    fn trajectory_rejects_denormalized_quaternion() {
        let path = tmpfile("badq.txt", "0.0 0 0 0 0 0 0 1.01\n");
        let err = load_trajectory(&path).unwrap_err();
        match err {
            GedfError::Parse { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("quaternion"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn trajectory_rejects_non_increasing_time() {
        let path = tmpfile("badt.txt", "1.0 0 0 0 0 0 0 1\n1.0 1 0 0 0 0 0 1\n");
        assert!(load_trajectory(&path).is_err());
    }
}
