//! Local ground-truth generation: voxelization, exact Euclidean distance
//! transform and extraction of grid extrema for optimizer warm starts.

use nalgebra::Vector3;

/// Dense boolean occupancy over a cube plus halo. Voxel `(0,0,0)` has its
/// center at `origin`.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self { origin, voxel_size, dims, occupied: vec![false; n] }
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    #[inline]
    pub fn is_occupied(&self, ix: usize, iy: usize, iz: usize) -> bool {
        self.occupied[self.index(ix, iy, iz)]
    }

    pub fn set_occupied(&mut self, ix: usize, iy: usize, iz: usize) {
        let i = self.index(ix, iy, iz);
        self.occupied[i] = true;
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|o| **o).count()
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(ix as f64, iy as f64, iz as f64) * self.voxel_size
    }
}

/// Per-voxel distance (meters) to the nearest occupied voxel center.
#[derive(Debug, Clone)]
pub struct LocalEdtGrid {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub distances: Vec<f64>,
}

impl LocalEdtGrid {
    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    #[inline]
    pub fn distance(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.distances[self.index(ix, iy, iz)]
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(ix as f64, iy as f64, iz as f64) * self.voxel_size
    }

    pub fn mean_distance(&self) -> f64 {
        if self.distances.is_empty() {
            return 0.0;
        }
        self.distances.iter().sum::<f64>() / self.distances.len() as f64
    }

    /// Sub-grid whose voxel centers fall inside `[min, max]` (inclusive, with
    /// a small epsilon for boundary arithmetic). Used to restrict extrema
    /// search and fit samples to the block-plus-overlap region without
    /// scanning the full halo.
    pub fn crop(&self, min: &Vector3<f64>, max: &Vector3<f64>) -> LocalEdtGrid {
        let eps = 1e-9 * self.voxel_size.max(1.0);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for j in 0..3 {
            let a = ((min[j] - self.origin[j]) / self.voxel_size - eps).ceil().max(0.0) as usize;
            let b = ((max[j] - self.origin[j]) / self.voxel_size + eps).floor() as isize;
            lo[j] = a.min(self.dims[j].saturating_sub(1));
            hi[j] = (b.max(lo[j] as isize) as usize).min(self.dims[j] - 1);
        }
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let mut distances = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for ix in lo[0]..=hi[0] {
            for iy in lo[1]..=hi[1] {
                for iz in lo[2]..=hi[2] {
                    distances.push(self.distance(ix, iy, iz));
                }
            }
        }
        LocalEdtGrid {
            origin: self.voxel_center(lo[0], lo[1], lo[2]),
            voxel_size: self.voxel_size,
            dims,
            distances,
        }
    }
}

/// Local maxima and minima of the EDT grid, reported at world-frame voxel
/// centers with their distance values.
#[derive(Debug, Clone, Default)]
pub struct ExtremaSet {
    pub maxima: Vec<(Vector3<f64>, f64)>,
    pub minima: Vec<(Vector3<f64>, f64)>,
}

/// Bins `points` into a boolean grid covering the cube expanded by `halo` on
/// every face. A voxel is occupied iff at least one point falls inside it.
pub fn voxelize_region(
    points: &[Vector3<f64>],
    cube_origin: &Vector3<f64>,
    cube_size: f64,
    halo: f64,
    voxel_size: f64,
) -> OccupancyGrid {
    assert!(voxel_size > 0.0, "voxel_size must be positive");
    assert!(halo >= 0.0, "halo must be non-negative");
    let min = cube_origin - Vector3::repeat(halo);
    let extent = cube_size + 2.0 * halo;
    let n = (extent / voxel_size).ceil().max(1.0) as usize;
    let dims = [n, n, n];
    let origin = min + Vector3::repeat(voxel_size * 0.5);
    let mut grid = OccupancyGrid::new(origin, voxel_size, dims);
    for p in points {
        let mut idx = [0usize; 3];
        let mut inside = true;
        for j in 0..3 {
            let i = ((p[j] - min[j]) / voxel_size).floor();
            if i < 0.0 || i >= dims[j] as f64 {
                inside = false;
                break;
            }
            idx[j] = i as usize;
        }
        if inside {
            grid.set_occupied(idx[0], idx[1], idx[2]);
        }
    }
    grid
}

// 1-D squared distance transform over a sampled function (lower envelope of
// parabolas), exact up to floating point.
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = if f[p].is_infinite() {
                f64::NEG_INFINITY
            } else {
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
            };
            if s <= z[k] {
                if k == 0 {
                    // replace the only parabola
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
}

/// Exact Euclidean distance transform of the occupancy grid: per-voxel
/// distance in meters to the nearest occupied voxel center. An all-free grid
/// yields `empty_cap` everywhere (empty cubes only exist inside the
/// activation band, so the cap bounds the regression target).
pub fn exact_edt(grid: &OccupancyGrid, empty_cap: f64) -> LocalEdtGrid {
    let [nx, ny, nz] = grid.dims;
    let n = nx * ny * nz;
    let mut sq = vec![f64::INFINITY; n];
    let mut any = false;
    for (i, occ) in grid.occupied.iter().enumerate() {
        if *occ {
            sq[i] = 0.0;
            any = true;
        }
    }
    if !any {
        return LocalEdtGrid {
            origin: grid.origin,
            voxel_size: grid.voxel_size,
            dims: grid.dims,
            distances: vec![empty_cap; n],
        };
    }

    let nmax = nx.max(ny).max(nz);
    let mut f = vec![0.0f64; nmax];
    let mut out = vec![0.0f64; nmax];
    let mut v = vec![0usize; nmax];
    let mut z = vec![0.0f64; nmax + 1];
    let idx = |ix: usize, iy: usize, iz: usize| (ix * ny + iy) * nz + iz;

    // pass along z
    for ix in 0..nx {
        for iy in 0..ny {
            let base = (ix * ny + iy) * nz;
            let row = &sq[base..base + nz];
            if row.iter().all(|d| d.is_infinite()) {
                continue;
            }
            f[..nz].copy_from_slice(row);
            dt_1d(&f[..nz], &mut out[..nz], &mut v, &mut z);
            sq[base..base + nz].copy_from_slice(&out[..nz]);
        }
    }
    // pass along y
    for ix in 0..nx {
        for iz in 0..nz {
            for iy in 0..ny {
                f[iy] = sq[idx(ix, iy, iz)];
            }
            dt_1d(&f[..ny], &mut out[..ny], &mut v, &mut z);
            for iy in 0..ny {
                sq[idx(ix, iy, iz)] = out[iy];
            }
        }
    }
    // pass along x
    for iy in 0..ny {
        for iz in 0..nz {
            for ix in 0..nx {
                f[ix] = sq[idx(ix, iy, iz)];
            }
            dt_1d(&f[..nx], &mut out[..nx], &mut v, &mut z);
            for ix in 0..nx {
                sq[idx(ix, iy, iz)] = out[ix];
            }
        }
    }

    let vs = grid.voxel_size;
    let distances = sq.into_iter().map(|d| d.sqrt() * vs).collect();
    LocalEdtGrid {
        origin: grid.origin,
        voxel_size: grid.voxel_size,
        dims: grid.dims,
        distances,
    }
}

/// Strict 26-neighborhood extrema over interior voxels. Grids thinner than 3
/// voxels on any axis have no interior and yield an empty set.
pub fn find_extrema(edt: &LocalEdtGrid) -> ExtremaSet {
    let [nx, ny, nz] = edt.dims;
    let mut set = ExtremaSet::default();
    if nx < 3 || ny < 3 || nz < 3 {
        return set;
    }
    for ix in 1..nx - 1 {
        for iy in 1..ny - 1 {
            for iz in 1..nz - 1 {
                let c = edt.distance(ix, iy, iz);
                let mut is_max = true;
                let mut is_min = true;
                'outer: for dx in -1i32..=1 {
                    for dy in -1i32..=1 {
                        for dz in -1i32..=1 {
                            if dx == 0 && dy == 0 && dz == 0 {
                                continue;
                            }
                            let v = edt.distance(
                                (ix as i32 + dx) as usize,
                                (iy as i32 + dy) as usize,
                                (iz as i32 + dz) as usize,
                            );
                            if v >= c {
                                is_max = false;
                            }
                            if v <= c {
                                is_min = false;
                            }
                            if !is_max && !is_min {
                                break 'outer;
                            }
                        }
                    }
                }
                if is_max {
                    set.maxima.push((edt.voxel_center(ix, iy, iz), c));
                } else if is_min {
                    set.minima.push((edt.voxel_center(ix, iy, iz), c));
                }
            }
        }
    }
    set
}
