//! Per-block kernel fitting: extrema-seeded initialization and the adaptive
//! add-kernels-until-tolerance Levenberg-Marquardt loop.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::edt::{ExtremaSet, LocalEdtGrid};
use crate::error::{GedfError, Result};
use crate::field::{eval_mixture, GaussianKernel, EXPONENT_CUTOFF};
use crate::lm::{lm_solve, LeastSquaresProblem, LmConfig};

#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Mean-absolute-error target in meters; kernels are added until the
    /// block fit reaches it or `max_kernels` is hit.
    pub mae_tolerance: f64,
    pub max_kernels: usize,
    /// Kernels added per capacity-growth round.
    pub kernel_increment: usize,
    /// Initial kernel count for cubes containing no points.
    pub initial_kernels_empty: usize,
    /// Cap on the warm-start kernel count for occupied cubes.
    pub initial_kernels: usize,
    pub max_lm_iterations: usize,
    pub lm_initial_damping: f64,
    /// Length-scale bounds in meters, enforced by clamping in log space.
    pub min_length_scale: f64,
    pub max_length_scale: f64,
    /// |weight| seed for kernels placed at EDT minima.
    pub negative_seed_weight: f64,
    /// Kernels below this |weight| are pruned after convergence.
    pub prune_weight: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mae_tolerance: 0.05,
            max_kernels: 64,
            kernel_increment: 2,
            initial_kernels_empty: 1,
            initial_kernels: 8,
            max_lm_iterations: 100,
            lm_initial_damping: 1e-4,
            min_length_scale: 0.05,
            max_length_scale: 4.0,
            negative_seed_weight: 0.1,
            prune_weight: 1e-4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mae_tolerance <= 0.0 {
            return Err(GedfError::Config("mae_tolerance must be positive".into()));
        }
        if self.max_kernels < 1 {
            return Err(GedfError::Config("max_kernels must be at least 1".into()));
        }
        if self.min_length_scale <= 0.0 || self.min_length_scale >= self.max_length_scale {
            return Err(GedfError::Config(
                "length-scale bounds must satisfy 0 < min < max".into(),
            ));
        }
        Ok(())
    }
}

/// One fitted block: its kernel set and the fit error over the sample set
/// used for optimization.
#[derive(Debug, Clone)]
pub struct FittedBlock {
    pub kernels: Vec<GaussianKernel>,
    pub mae: f64,
    pub sample_count: usize,
    pub converged: bool,
}

// 7 parameters per kernel: w, mu, log(l). Log-space length scales keep them
// positive without a constrained solver.
const PARAMS_PER_KERNEL: usize = 7;

fn pack_params(kernels: &[GaussianKernel]) -> DVector<f64> {
    let mut p = DVector::zeros(kernels.len() * PARAMS_PER_KERNEL);
    for (k, kernel) in kernels.iter().enumerate() {
        let o = k * PARAMS_PER_KERNEL;
        p[o] = kernel.weight;
        for j in 0..3 {
            p[o + 1 + j] = kernel.center[j];
            p[o + 4 + j] = kernel.length_scales[j].ln();
        }
    }
    p
}

fn unpack_params(params: &DVector<f64>) -> Vec<GaussianKernel> {
    let n = params.len() / PARAMS_PER_KERNEL;
    (0..n)
        .map(|k| {
            let o = k * PARAMS_PER_KERNEL;
            GaussianKernel::new(
                params[o],
                Vector3::new(params[o + 1], params[o + 2], params[o + 3]),
                Vector3::new(
                    params[o + 4].exp(),
                    params[o + 5].exp(),
                    params[o + 6].exp(),
                ),
            )
        })
        .collect()
}

/// Residuals `d_hat(x_s) - target_s` over a fixed sample set, with the
/// analytical Jacobian in (w, mu, log l).
pub(crate) struct MixtureFitProblem {
    pub samples: Vec<(Vector3<f64>, f64)>,
    pub min_log_scale: f64,
    pub max_log_scale: f64,
}

impl LeastSquaresProblem for MixtureFitProblem {
    fn residuals(&self, params: &DVector<f64>) -> DVector<f64> {
        let kernels = unpack_params(params);
        let mut r = DVector::zeros(self.samples.len());
        for (s, (x, target)) in self.samples.iter().enumerate() {
            let (v, _) = eval_mixture(&kernels, x);
            r[s] = v - target;
        }
        r
    }

    fn jacobian(&self, params: &DVector<f64>) -> DMatrix<f64> {
        let kernels = unpack_params(params);
        let mut jac = DMatrix::zeros(self.samples.len(), params.len());
        for (s, (x, _)) in self.samples.iter().enumerate() {
            for (k, kernel) in kernels.iter().enumerate() {
                let o = k * PARAMS_PER_KERNEL;
                let mut e = 0.0;
                let mut d = [0.0f64; 3];
                let mut inv_l2 = [0.0f64; 3];
                for j in 0..3 {
                    let l = kernel.length_scales[j];
                    inv_l2[j] = 1.0 / (l * l);
                    d[j] = x[j] - kernel.center[j];
                    e += d[j] * d[j] * inv_l2[j];
                }
                e *= 0.5;
                if e > EXPONENT_CUTOFF {
                    continue;
                }
                let basis = (-e).exp();
                let g = kernel.weight * basis;
                jac[(s, o)] = basis;
                for j in 0..3 {
                    jac[(s, o + 1 + j)] = g * d[j] * inv_l2[j];
                    jac[(s, o + 4 + j)] = g * d[j] * d[j] * inv_l2[j];
                }
            }
        }
        jac
    }

    fn retract(&mut self, params: &mut DVector<f64>) {
        let n = params.len() / PARAMS_PER_KERNEL;
        for k in 0..n {
            let o = k * PARAMS_PER_KERNEL;
            for j in 0..3 {
                params[o + 4 + j] = params[o + 4 + j].clamp(self.min_log_scale, self.max_log_scale);
            }
        }
    }
}

/// Warm-start kernels from the EDT extrema: positive kernels at maxima
/// (weight = local distance), negative kernels at minima. When candidates
/// exceed the budget the ones with the largest residual against the
/// mixture built so far are kept (greedy). Empty extrema fall back to a
/// single kernel at the grid center with the mean distance as weight.
pub fn initialize_kernels(
    extrema: &ExtremaSet,
    edt: &LocalEdtGrid,
    budget: usize,
    init_scale: f64,
    negative_seed_weight: f64,
) -> Vec<GaussianKernel> {
    assert!(budget >= 1);
    let scales = Vector3::repeat(init_scale);
    let mut candidates: Vec<(Vector3<f64>, f64, f64)> = Vec::new();
    for (pos, value) in &extrema.maxima {
        let w = if *value != 0.0 { *value } else { 1e-3 };
        candidates.push((*pos, *value, w));
    }
    for (pos, value) in &extrema.minima {
        candidates.push((*pos, *value, -negative_seed_weight));
    }

    if candidates.is_empty() {
        let center = edt.origin
            + Vector3::new(
                (edt.dims[0] - 1) as f64,
                (edt.dims[1] - 1) as f64,
                (edt.dims[2] - 1) as f64,
            ) * (edt.voxel_size * 0.5);
        let mean = edt.mean_distance();
        let w = if mean != 0.0 { mean } else { 1e-3 };
        return vec![GaussianKernel::new(w, center, scales)];
    }

    if candidates.len() <= budget {
        return candidates
            .into_iter()
            .map(|(pos, _, w)| GaussianKernel::new(w, pos, scales))
            .collect();
    }

    // greedy: repeatedly take the candidate with the largest residual
    // against the kernels selected so far
    let mut selected: Vec<GaussianKernel> = Vec::with_capacity(budget);
    let mut used = vec![false; candidates.len()];
    while selected.len() < budget {
        let mut best = None;
        let mut best_res = -1.0;
        for (i, (pos, value, _)) in candidates.iter().enumerate() {
            if used[i] {
                continue;
            }
            let (v, _) = eval_mixture(&selected, pos);
            let res = (value - v).abs();
            if res > best_res {
                best_res = res;
                best = Some(i);
            }
        }
        match best {
            Some(i) => {
                used[i] = true;
                let (pos, _, w) = candidates[i];
                selected.push(GaussianKernel::new(w, pos, scales));
            }
            None => break,
        }
    }
    selected
}

fn mixture_mae(kernels: &[GaussianKernel], samples: &[(Vector3<f64>, f64)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples
        .iter()
        .map(|(x, t)| (eval_mixture(kernels, x).0 - t).abs())
        .sum();
    sum / samples.len() as f64
}

// Store parameters at the precision of the on-disk format so a save/load
// round trip reproduces queries bit for bit.
fn quantize_kernels(kernels: &mut [GaussianKernel]) {
    for k in kernels.iter_mut() {
        k.weight = k.weight as f32 as f64;
        for j in 0..3 {
            k.center[j] = k.center[j] as f32 as f64;
            k.length_scales[j] = k.length_scales[j] as f32 as f64;
        }
    }
}

/// Fits one block's kernel set to its local EDT. Samples are the voxel
/// centers inside `[region_min, region_max]` (the cube expanded by the
/// overlap margin). `empty` selects the reduced initial budget for cubes
/// without points.
pub fn fit_block(
    edt: &LocalEdtGrid,
    extrema: &ExtremaSet,
    cfg: &FitConfig,
    region_min: &Vector3<f64>,
    region_max: &Vector3<f64>,
    kernel_init_scale: f64,
    empty: bool,
) -> Result<FittedBlock> {
    cfg.validate()?;

    let eps = 1e-9;
    let mut samples: Vec<(Vector3<f64>, f64)> = Vec::new();
    for ix in 0..edt.dims[0] {
        for iy in 0..edt.dims[1] {
            for iz in 0..edt.dims[2] {
                let c = edt.voxel_center(ix, iy, iz);
                if (0..3).all(|j| c[j] >= region_min[j] - eps && c[j] <= region_max[j] + eps) {
                    samples.push((c, edt.distance(ix, iy, iz)));
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(GedfError::Input("fit region contains no voxel centers".into()));
    }

    let in_region = |p: &Vector3<f64>| {
        (0..3).all(|j| p[j] >= region_min[j] - eps && p[j] <= region_max[j] + eps)
    };
    let local_extrema = ExtremaSet {
        maxima: extrema.maxima.iter().copied().filter(|(p, _)| in_region(p)).collect(),
        minima: extrema.minima.iter().copied().filter(|(p, _)| in_region(p)).collect(),
    };

    let n_extrema = local_extrema.maxima.len() + local_extrema.minima.len();
    let budget = if empty {
        cfg.initial_kernels_empty.max(1)
    } else {
        n_extrema.clamp(1, cfg.initial_kernels.min(cfg.max_kernels))
    };
    let mut kernels =
        initialize_kernels(&local_extrema, edt, budget, kernel_init_scale, cfg.negative_seed_weight);
    kernels.truncate(cfg.max_kernels);

    let lm_cfg = LmConfig {
        max_iterations: cfg.max_lm_iterations,
        initial_damping: cfg.lm_initial_damping,
        ..Default::default()
    };
    let min_log = cfg.min_length_scale.ln();
    let max_log = cfg.max_length_scale.ln();
    let mut problem = MixtureFitProblem {
        samples,
        min_log_scale: min_log,
        max_log_scale: max_log,
    };

    let mut lm_ok;
    let mut mae;
    let min_sep = 2.0 * edt.voxel_size;
    loop {
        let mut initial = pack_params(&kernels);
        problem.retract(&mut initial);
        let result = lm_solve(&mut problem, initial, &lm_cfg);
        lm_ok = result.converged;
        kernels = unpack_params(&result.params);
        mae = mixture_mae(&kernels, &problem.samples);

        if !lm_ok || mae <= cfg.mae_tolerance || kernels.len() >= cfg.max_kernels {
            break;
        }

        // grow capacity: place new kernels at the worst residual samples,
        // keeping them a couple of voxels apart
        let mut residuals: Vec<(usize, f64)> = problem
            .samples
            .iter()
            .enumerate()
            .map(|(i, (x, t))| (i, t - eval_mixture(&kernels, x).0))
            .collect();
        residuals.sort_by(|a, b| {
            b.1.abs().partial_cmp(&a.1.abs()).unwrap().then(a.0.cmp(&b.0))
        });
        let room = cfg.max_kernels - kernels.len();
        let mut placed: Vec<Vector3<f64>> = Vec::new();
        for (i, r) in residuals {
            if placed.len() >= cfg.kernel_increment.min(room) {
                break;
            }
            let pos = problem.samples[i].0;
            if placed.iter().any(|p| (p - pos).norm() < min_sep) {
                continue;
            }
            let w = if r.abs() > 1e-3 { r } else { 1e-3 * r.signum() };
            let w = if w == 0.0 { 1e-3 } else { w };
            kernels.push(GaussianKernel::new(
                w,
                pos,
                Vector3::repeat((kernel_init_scale * 0.5).clamp(
                    cfg.min_length_scale,
                    cfg.max_length_scale,
                )),
            ));
            placed.push(pos);
        }
        if placed.is_empty() {
            break;
        }
    }

    // prune negligible kernels but keep at least one, then re-verify the MAE
    if kernels.len() > 1 {
        let mut pruned: Vec<GaussianKernel> = kernels
            .iter()
            .copied()
            .filter(|k| k.weight.abs() >= cfg.prune_weight)
            .collect();
        if pruned.is_empty() {
            let best = kernels
                .iter()
                .copied()
                .max_by(|a, b| a.weight.abs().partial_cmp(&b.weight.abs()).unwrap())
                .unwrap();
            pruned.push(best);
        }
        kernels = pruned;
    }
    for k in kernels.iter_mut() {
        if k.weight == 0.0 {
            k.weight = f32::MIN_POSITIVE as f64;
        }
    }
    quantize_kernels(&mut kernels);
    mae = mixture_mae(&kernels, &problem.samples);

    Ok(FittedBlock {
        converged: lm_ok && mae <= cfg.mae_tolerance,
        sample_count: problem.samples.len(),
        mae,
        kernels,
    })
}
