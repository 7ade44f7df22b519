//! Block-sparse map: active-cube selection, the build pipeline
//! (voxelize -> EDT -> fit) and globally C1 blended distance/gradient
//! queries.

use std::collections::{HashMap, HashSet};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::edt::{exact_edt, find_extrema, voxelize_region};
use crate::error::{GedfError, Result};
use crate::field::{eval_mixture, smoothstep, smoothstep_derivative, FieldSample};
use crate::fit::{fit_block, FitConfig, FittedBlock};
use crate::kdtree::KdTree;

pub type BlockIndex = (i32, i32, i32);

/// Packs a grid index into a sortable 64-bit key; collision-free within
/// +-2^20 blocks per axis.
pub fn pack_block_key(idx: BlockIndex) -> u64 {
    const OFFSET: i64 = 1 << 20;
    const MASK: u64 = (1 << 21) - 1;
    let x = (idx.0 as i64 + OFFSET) as u64 & MASK;
    let y = (idx.1 as i64 + OFFSET) as u64 & MASK;
    let z = (idx.2 as i64 + OFFSET) as u64 & MASK;
    (x << 42) | (y << 21) | z
}

#[derive(Debug, Clone)]
pub struct MapConfig {
    /// Cube edge length in meters.
    pub block_size: f64,
    /// Blend band width around each cube, meters. Must be < block_size / 2.
    pub overlap_margin: f64,
    /// Empty cubes whose center is within this distance of any point are
    /// still modeled, so near-surface free space stays continuous.
    pub activation_distance: f64,
    /// Local EDT voxel resolution in meters.
    pub edt_voxel_size: f64,
    pub fit: FitConfig,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            block_size: 1.0,
            overlap_margin: 0.25,
            activation_distance: 1.5,
            edt_voxel_size: 0.1,
            fit: FitConfig::default(),
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size <= 0.0 {
            return Err(GedfError::Config("block_size must be positive".into()));
        }
        if !(self.overlap_margin > 0.0 && self.overlap_margin < self.block_size / 2.0) {
            return Err(GedfError::Config(
                "overlap_margin must satisfy 0 < margin < block_size / 2".into(),
            ));
        }
        if self.activation_distance < self.block_size / 2.0 {
            return Err(GedfError::Config(
                "activation_distance must be at least block_size / 2".into(),
            ));
        }
        if self.edt_voxel_size <= 0.0 {
            return Err(GedfError::Config("edt_voxel_size must be positive".into()));
        }
        self.fit.validate()
    }
}

/// Spatial hash of fitted blocks plus global metadata. Immutable once built;
/// queries are read-only and thread-safe.
#[derive(Debug, Clone)]
pub struct SparseGmmMap {
    pub config: MapConfig,
    blocks: HashMap<BlockIndex, FittedBlock>,
    pub bounds: (Vector3<f64>, Vector3<f64>),
    pub global_mae: f64,
    /// Blocks whose fit did not reach tolerance (retained but flagged).
    pub flagged_blocks: usize,
}

/// Reconstruction-quality metrics over a uniform probe grid.
#[derive(Debug, Clone, Copy)]
pub struct ReconstructionMetrics {
    pub mae: f64,
    pub median: f64,
    pub std: f64,
    pub grad_mean: f64,
    pub grad_std: f64,
    pub probe_count: usize,
}

fn block_of(x: &Vector3<f64>, block_size: f64) -> BlockIndex {
    (
        (x.x / block_size).floor() as i32,
        (x.y / block_size).floor() as i32,
        (x.z / block_size).floor() as i32,
    )
}

/// Builds the map: selects the active cubes (occupied plus empty cubes whose
/// center is within the activation distance of any point), computes each
/// cube's local EDT over a halo wide enough for the transform to be exact
/// inside the fit region, and fits every cube's kernel set in parallel.
pub fn build_map(points: &[Vector3<f64>], cfg: &MapConfig) -> Result<SparseGmmMap> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(GedfError::Input("build_map requires at least one point".into()));
    }

    let b = cfg.block_size;
    let delta = cfg.overlap_margin;
    let vox = cfg.edt_voxel_size;

    let mut by_cube: HashMap<BlockIndex, Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        by_cube.entry(block_of(p, b)).or_default().push(i);
    }

    // candidate empty cubes: every cube within Chebyshev reach of an
    // occupied one, then filtered by exact center-to-point distance
    let reach = (cfg.activation_distance / b).ceil() as i32 + 1;
    let mut candidates: HashSet<BlockIndex> = HashSet::new();
    for key in by_cube.keys() {
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    candidates.insert((key.0 + dx, key.1 + dy, key.2 + dz));
                }
            }
        }
    }

    let nearest_from_cubes = |x: &Vector3<f64>, around: BlockIndex, radius: i32| -> f64 {
        let mut best = f64::INFINITY;
        for dx in -radius..=radius {
            for dy in -radius..=radius {
                for dz in -radius..=radius {
                    if let Some(ids) = by_cube.get(&(around.0 + dx, around.1 + dy, around.2 + dz)) {
                        for &i in ids {
                            best = best.min((points[i] - x).norm());
                        }
                    }
                }
            }
        }
        best
    };

    // active set with each cube's center-to-surface distance
    let mut active: Vec<(BlockIndex, f64, bool)> = Vec::new();
    let mut sorted_candidates: Vec<BlockIndex> = candidates.into_iter().collect();
    sorted_candidates.sort_by_key(|k| pack_block_key(*k));
    for key in sorted_candidates {
        let occupied = by_cube.contains_key(&key);
        let center = Vector3::new(
            (key.0 as f64 + 0.5) * b,
            (key.1 as f64 + 0.5) * b,
            (key.2 as f64 + 0.5) * b,
        );
        let dc = nearest_from_cubes(&center, key, reach);
        if occupied || dc <= cfg.activation_distance {
            active.push((key, dc, occupied));
        }
    }

    let half_diag = 3.0f64.sqrt() * (b / 2.0 + delta);
    let fitted: Vec<(BlockIndex, FittedBlock)> = active
        .par_iter()
        .map(|&(key, dc, occupied)| {
            let origin = Vector3::new(key.0 as f64 * b, key.1 as f64 * b, key.2 as f64 * b);
            // halo wide enough that every fit sample sees its true nearest
            // occupied voxel; rounded up to keep the voxel lattice phase
            // identical across blocks
            let raw_halo = delta + dc.min(cfg.activation_distance) + half_diag + 2.0 * vox;
            let halo = (raw_halo / vox).ceil() * vox;
            let reach_cubes = (halo / b).ceil() as i32;
            let mut local_points = Vec::new();
            for dx in -reach_cubes..=reach_cubes {
                for dy in -reach_cubes..=reach_cubes {
                    for dz in -reach_cubes..=reach_cubes {
                        if let Some(ids) = by_cube.get(&(key.0 + dx, key.1 + dy, key.2 + dz)) {
                            local_points.extend(ids.iter().map(|&i| points[i]));
                        }
                    }
                }
            }
            let grid = voxelize_region(&local_points, &origin, b, halo, vox);
            let edt = exact_edt(&grid, cfg.activation_distance);
            let region_min = origin - Vector3::repeat(delta);
            let region_max = origin + Vector3::repeat(b + delta);
            let cropped = edt.crop(
                &(region_min - Vector3::repeat(vox)),
                &(region_max + Vector3::repeat(vox)),
            );
            let extrema = find_extrema(&cropped);
            let block = fit_block(
                &cropped,
                &extrema,
                &cfg.fit,
                &region_min,
                &region_max,
                0.5 * b,
                !occupied,
            )
            .expect("fit region is never empty for an active cube");
            (key, block)
        })
        .collect();

    let mut blocks = HashMap::with_capacity(fitted.len());
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    let mut mae_sum = 0.0;
    let mut sample_sum = 0usize;
    let mut flagged = 0usize;
    for (key, block) in fitted {
        let origin = Vector3::new(key.0 as f64 * b, key.1 as f64 * b, key.2 as f64 * b);
        for j in 0..3 {
            min[j] = min[j].min(origin[j] - delta);
            max[j] = max[j].max(origin[j] + b + delta);
        }
        mae_sum += block.mae * block.sample_count as f64;
        sample_sum += block.sample_count;
        if !block.converged {
            flagged += 1;
        }
        blocks.insert(key, block);
    }
    // keep metadata at on-disk precision so a save/load round trip is exact
    for j in 0..3 {
        min[j] = min[j] as f32 as f64;
        max[j] = max[j] as f32 as f64;
    }
    let global_mae = if sample_sum > 0 { mae_sum / sample_sum as f64 } else { 0.0 };

    Ok(SparseGmmMap {
        config: cfg.clone(),
        blocks,
        bounds: (min, max),
        global_mae,
        flagged_blocks: flagged,
    })
}

impl SparseGmmMap {
    /// Reassembles a map from already-fitted blocks (used by the loader).
    pub fn from_parts(
        config: MapConfig,
        blocks: HashMap<BlockIndex, FittedBlock>,
        bounds: (Vector3<f64>, Vector3<f64>),
        global_mae: f64,
    ) -> Self {
        let flagged = blocks.values().filter(|b| !b.converged).count();
        Self { config, blocks, bounds, global_mae, flagged_blocks: flagged }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn kernel_count(&self) -> usize {
        self.blocks.values().map(|b| b.kernels.len()).sum()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&BlockIndex, &FittedBlock)> {
        self.blocks.iter()
    }

    pub fn get_block(&self, key: &BlockIndex) -> Option<&FittedBlock> {
        self.blocks.get(key)
    }

    // Per-axis blend factor of a block at coordinate x: 1 inside the cube,
    // smoothstep-ramped to 0 across the delta-wide band outside each face.
    #[inline]
    fn axis_weight(&self, x: f64, lo: f64, hi: f64) -> (f64, f64) {
        let delta = self.config.overlap_margin;
        if x < lo {
            let t = (x - (lo - delta)) / delta;
            if t <= 0.0 {
                (0.0, 0.0)
            } else {
                (smoothstep(t), smoothstep_derivative(t) / delta)
            }
        } else if x > hi {
            let t = ((hi + delta) - x) / delta;
            if t <= 0.0 {
                (0.0, 0.0)
            } else {
                (smoothstep(t), -smoothstep_derivative(t) / delta)
            }
        } else {
            (1.0, 0.0)
        }
    }

    /// Blended distance and gradient at `x`. The weights are per-axis
    /// smoothstep products, normalized over the contributing blocks, and the
    /// returned gradient includes the weight-derivative term so it is the
    /// true derivative of the blended value. Outside every active block's
    /// extended domain the sample is invalid with value and gradient zero.
    pub fn query(&self, x: &Vector3<f64>) -> FieldSample {
        let b = self.config.block_size;
        let delta = self.config.overlap_margin;
        let base = block_of(x, b);

        let mut axis_candidates: [[Option<i32>; 2]; 3] = [[None; 2]; 3];
        let base_arr = [base.0, base.1, base.2];
        for j in 0..3 {
            let o = base_arr[j] as f64 * b;
            axis_candidates[j][0] = Some(base_arr[j]);
            if x[j] <= o + delta {
                axis_candidates[j][1] = Some(base_arr[j] - 1);
            } else if x[j] >= o + b - delta {
                axis_candidates[j][1] = Some(base_arr[j] + 1);
            }
        }

        let mut weight_sum = 0.0;
        let mut dweight_sum = Vector3::zeros();
        let mut value_sum = 0.0;
        let mut grad_sum = Vector3::zeros();

        for &ci in axis_candidates[0].iter().flatten() {
            for &cj in axis_candidates[1].iter().flatten() {
                for &ck in axis_candidates[2].iter().flatten() {
                    let key = (ci, cj, ck);
                    let Some(block) = self.blocks.get(&key) else { continue };
                    let o = Vector3::new(ci as f64 * b, cj as f64 * b, ck as f64 * b);
                    let mut s = [0.0f64; 3];
                    let mut ds = [0.0f64; 3];
                    let mut zero = false;
                    for j in 0..3 {
                        let (sj, dsj) = self.axis_weight(x[j], o[j], o[j] + b);
                        if sj == 0.0 {
                            zero = true;
                            break;
                        }
                        s[j] = sj;
                        ds[j] = dsj;
                    }
                    if zero {
                        continue;
                    }
                    let u = s[0] * s[1] * s[2];
                    let du = Vector3::new(
                        ds[0] * s[1] * s[2],
                        s[0] * ds[1] * s[2],
                        s[0] * s[1] * ds[2],
                    );
                    let (f, g) = eval_mixture(&block.kernels, x);
                    weight_sum += u;
                    dweight_sum += du;
                    value_sum += u * f;
                    grad_sum += du * f + u * g;
                }
            }
        }

        if weight_sum <= 0.0 {
            return FieldSample::invalid();
        }
        let value = value_sum / weight_sum;
        let gradient = grad_sum / weight_sum - dweight_sum * (value / weight_sum);
        FieldSample { value, gradient, valid: true }
    }

    /// Elementwise [`Self::query`]; output order matches input order
    /// regardless of internal parallelism.
    pub fn query_batch(&self, xs: &[Vector3<f64>]) -> Vec<FieldSample> {
        xs.par_iter().map(|x| self.query(x)).collect()
    }

    pub fn is_inside_bounds(&self, x: &Vector3<f64>) -> bool {
        (0..3).all(|j| x[j] >= self.bounds.0[j] && x[j] <= self.bounds.1[j])
    }
}

/// Probes a uniform grid over the map bounds against the nearest-neighbor
/// distance to `truth_points`, trimming the worst `outlier_trim` fraction of
/// errors. Gradient statistics are taken over the same retained probes.
pub fn eval_reconstruction(
    map: &SparseGmmMap,
    truth_points: &[Vector3<f64>],
    probe_step: f64,
    outlier_trim: f64,
) -> Result<ReconstructionMetrics> {
    eval_reconstruction_filtered(map, truth_points, probe_step, outlier_trim, 0.0)
}

/// [`eval_reconstruction`] restricted to probes whose true surface distance
/// is at least `min_surface_distance` (used for gradient-consistency checks
/// away from surfaces).
pub fn eval_reconstruction_filtered(
    map: &SparseGmmMap,
    truth_points: &[Vector3<f64>],
    probe_step: f64,
    outlier_trim: f64,
    min_surface_distance: f64,
) -> Result<ReconstructionMetrics> {
    if probe_step <= 0.0 {
        return Err(GedfError::Config("probe_step must be positive".into()));
    }
    if !(0.0..1.0).contains(&outlier_trim) {
        return Err(GedfError::Config("outlier_trim must be in [0, 1)".into()));
    }
    if truth_points.is_empty() {
        return Err(GedfError::Input("truth point set is empty".into()));
    }
    let tree = KdTree::build(truth_points);
    let (lo, hi) = map.bounds;

    let mut probes = Vec::new();
    let mut p = lo + Vector3::repeat(probe_step * 0.5);
    while p.x <= hi.x {
        p.y = lo.y + probe_step * 0.5;
        while p.y <= hi.y {
            p.z = lo.z + probe_step * 0.5;
            while p.z <= hi.z {
                probes.push(p);
                p.z += probe_step;
            }
            p.y += probe_step;
        }
        p.x += probe_step;
    }

    let samples = map.query_batch(&probes);
    let mut entries: Vec<(f64, f64)> = Vec::new(); // (|error|, |grad|)
    for (probe, sample) in probes.iter().zip(samples.iter()) {
        if !sample.valid {
            continue;
        }
        let truth = tree.nearest_distance(probe).unwrap();
        if truth < min_surface_distance {
            continue;
        }
        entries.push(((sample.value - truth).abs(), sample.gradient.norm()));
    }
    if entries.is_empty() {
        return Err(GedfError::Numerical("no valid probes inside the map".into()));
    }

    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let drop = ((entries.len() as f64) * outlier_trim).floor() as usize;
    let kept = &entries[..entries.len() - drop.min(entries.len() - 1)];

    let n = kept.len() as f64;
    let mae = kept.iter().map(|e| e.0).sum::<f64>() / n;
    let median = if kept.len() % 2 == 1 {
        kept[kept.len() / 2].0
    } else {
        0.5 * (kept[kept.len() / 2 - 1].0 + kept[kept.len() / 2].0)
    };
    let var = kept.iter().map(|e| (e.0 - mae) * (e.0 - mae)).sum::<f64>() / n;
    let grad_mean = kept.iter().map(|e| e.1).sum::<f64>() / n;
    let grad_var = kept.iter().map(|e| (e.1 - grad_mean) * (e.1 - grad_mean)).sum::<f64>() / n;

    Ok(ReconstructionMetrics {
        mae,
        median,
        std: var.sqrt(),
        grad_mean,
        grad_std: grad_var.sqrt(),
        probe_count: kept.len(),
    })
}
