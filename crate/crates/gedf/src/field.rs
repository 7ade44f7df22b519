//! Axis-aligned anisotropic Gaussian kernels, mixture evaluation and the
//! smoothstep blending primitive.
//!
//! Everything here is a pure function over immutable inputs; the fitter, the
//! sparse map and the registration Jacobians are all built on these.

use nalgebra::Vector3;

/// Exponent argument below which a kernel contribution is treated as zero.
/// The truncation error is bounded by `exp(-20) * |w| < 2.1e-9 * |w|`.
pub const EXPONENT_CUTOFF: f64 = 20.0;

/// One axis-aligned anisotropic Gaussian: `w * exp(-0.5 * sum_j (x_j - mu_j)^2 / l_j^2)`.
///
/// The weight is the amplitude of the distance contribution in meters and may
/// be negative; negative kernels carve the field down to zero at surfaces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    /// Amplitude in meters. Finite and nonzero.
    pub weight: f64,
    /// Kernel center in meters.
    pub center: Vector3<f64>,
    /// Per-axis length scales in meters, strictly positive.
    pub length_scales: Vector3<f64>,
}

impl GaussianKernel {
    pub fn new(weight: f64, center: Vector3<f64>, length_scales: Vector3<f64>) -> Self {
        Self { weight, center, length_scales }
    }

    /// Type invariants: positive length scales, finite nonzero weight.
    pub fn is_valid(&self) -> bool {
        self.weight.is_finite()
            && self.weight != 0.0
            && self.center.iter().all(|c| c.is_finite())
            && self.length_scales.iter().all(|l| l.is_finite() && *l > 0.0)
    }

    #[inline]
    fn exponent(&self, x: &Vector3<f64>) -> f64 {
        let mut e = 0.0;
        for j in 0..3 {
            let d = (x[j] - self.center[j]) / self.length_scales[j];
            e += d * d;
        }
        0.5 * e
    }

    /// Kernel value at `x`.
    #[inline]
    pub fn eval(&self, x: &Vector3<f64>) -> f64 {
        let e = self.exponent(x);
        if e > EXPONENT_CUTOFF {
            return 0.0;
        }
        self.weight * (-e).exp()
    }

    /// Closed-form gradient: `-g(x) * (x_j - mu_j) / l_j^2` per axis.
    #[inline]
    pub fn eval_gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.eval_with_gradient(x).1
    }

    /// Value and gradient in one pass.
    #[inline]
    pub fn eval_with_gradient(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let e = self.exponent(x);
        if e > EXPONENT_CUTOFF {
            return (0.0, Vector3::zeros());
        }
        let g = self.weight * (-e).exp();
        let mut grad = Vector3::zeros();
        for j in 0..3 {
            let l = self.length_scales[j];
            grad[j] = -g * (x[j] - self.center[j]) / (l * l);
        }
        (g, grad)
    }
}

/// Sum of kernel values and gradients at `x`, computed in a single pass.
/// An empty kernel set yields `(0, 0)`.
pub fn eval_mixture(kernels: &[GaussianKernel], x: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let mut value = 0.0;
    let mut grad = Vector3::zeros();
    for k in kernels {
        let (v, g) = k.eval_with_gradient(x);
        value += v;
        grad += g;
    }
    (value, grad)
}

/// One blended field query. When `valid` is false the point lies outside the
/// mapped volume and value/gradient are exactly zero; registration uses that
/// sentinel to mask out-of-map points.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldSample {
    pub value: f64,
    pub gradient: Vector3<f64>,
    pub valid: bool,
}

impl FieldSample {
    pub fn invalid() -> Self {
        Self { value: 0.0, gradient: Vector3::zeros(), valid: false }
    }
}

/// Cubic Hermite blend `3t^2 - 2t^3` with zero derivative at both ends.
/// The argument is clamped internally so callers may pass slightly
/// out-of-range values from boundary arithmetic.
#[inline]
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Derivative of [`smoothstep`]: `6t(1-t)` on [0,1], zero outside.
#[inline]
pub fn smoothstep_derivative(t: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    6.0 * t * (1.0 - t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kernel(rng: &mut ChaCha8Rng) -> GaussianKernel {
        let w = if rng.random::<bool>() { 1.0 } else { -1.0 } * rng.random_range(0.1..3.0);
        let center = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let scales = Vector3::new(
            rng.random_range(0.2..2.0),
            rng.random_range(0.2..2.0),
            rng.random_range(0.2..2.0),
        );
        GaussianKernel::new(w, center, scales)
    }

    #[test]
    fn kernel_value_at_center_is_weight() {
        let k = GaussianKernel::new(2.5, Vector3::new(1.0, 2.0, 3.0), Vector3::repeat(1.0));
        assert_eq!(k.eval(&Vector3::new(1.0, 2.0, 3.0)), 2.5);
    }

    #[test]
    fn kernel_value_unit_offset() {
        let k = GaussianKernel::new(1.0, Vector3::zeros(), Vector3::repeat(1.0));
        assert_relative_eq!(k.eval(&Vector3::new(1.0, 0.0, 0.0)), (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn kernel_value_anisotropic_negative() {
        let k = GaussianKernel::new(-1.0, Vector3::zeros(), Vector3::new(2.0, 1.0, 1.0));
        assert_relative_eq!(
            k.eval(&Vector3::new(2.0, 0.0, 0.0)),
            -(-0.5f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn gradient_vanishes_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let k = random_kernel(&mut rng);
            let g = k.eval_gradient(&k.center.clone());
            assert_eq!(g, Vector3::zeros());
        }
    }

    #[test]
    fn gradient_unit_offset() {
        let k = GaussianKernel::new(1.0, Vector3::zeros(), Vector3::repeat(1.0));
        let g = k.eval_gradient(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(g.x, -(-0.5f64).exp(), epsilon = 1e-12);
        assert_eq!(g.y, 0.0);
        assert_eq!(g.z, 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 1e-5;
        for _ in 0..1000 {
            let k = random_kernel(&mut rng);
            let x = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let g = k.eval_gradient(&x);
            for j in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let fd = (k.eval(&xp) - k.eval(&xm)) / (2.0 * h);
                let scale = g[j].abs().max(fd.abs()).max(1e-9);
                assert!(
                    (g[j] - fd).abs() / scale < 1e-5,
                    "kernel {:?} at {:?}: analytic {} vs fd {}",
                    k,
                    x,
                    g[j],
                    fd
                );
            }
        }
    }

    #[test]
    fn mixture_empty_is_zero() {
        let (v, g) = eval_mixture(&[], &Vector3::new(1.0, -2.0, 0.5));
        assert_eq!(v, 0.0);
        assert_eq!(g, Vector3::zeros());
    }

    #[test]
    fn mixture_duplicate_kernel_doubles() {
        let k = GaussianKernel::new(1.3, Vector3::new(0.2, 0.1, -0.4), Vector3::repeat(0.7));
        let x = Vector3::new(0.5, 0.0, 0.0);
        let (v1, g1) = eval_mixture(&[k], &x);
        let (v2, g2) = eval_mixture(&[k, k], &x);
        assert_eq!(v2, 2.0 * v1);
        assert_eq!(g2, 2.0 * g1);
    }

    #[test]
    fn mixture_equals_per_kernel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kernels: Vec<_> = (0..5).map(|_| random_kernel(&mut rng)).collect();
        for _ in 0..100 {
            let x = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let (v, _) = eval_mixture(&kernels, &x);
            let direct: f64 = kernels.iter().map(|k| k.eval(&x)).sum();
            assert_relative_eq!(v, direct, max_relative = 1e-12, epsilon = 1e-300);
        }
    }

    #[test]
    fn mixture_linearity_over_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<_> = (0..4).map(|_| random_kernel(&mut rng)).collect();
        let b: Vec<_> = (0..3).map(|_| random_kernel(&mut rng)).collect();
        let both: Vec<_> = a.iter().chain(b.iter()).copied().collect();
        for _ in 0..50 {
            let x = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            let (va, ga) = eval_mixture(&a, &x);
            let (vb, gb) = eval_mixture(&b, &x);
            let (v, g) = eval_mixture(&both, &x);
            assert_relative_eq!(v, va + vb, max_relative = 1e-12, epsilon = 1e-300);
            for j in 0..3 {
                assert_relative_eq!(g[j], ga[j] + gb[j], max_relative = 1e-12, epsilon = 1e-300);
            }
        }
    }

    #[test]
    fn smoothstep_boundaries_and_midpoint() {
        assert_eq!(smoothstep(0.0), 0.0);
        assert_eq!(smoothstep(1.0), 1.0);
        assert_eq!(smoothstep(0.5), 0.5);
        assert_eq!(smoothstep(0.25), 0.15625);
        // internal clamping
        assert_eq!(smoothstep(-0.3), 0.0);
        assert_eq!(smoothstep(1.7), 1.0);
    }

    #[test]
    fn smoothstep_flat_endpoints() {
        let h = 1e-6;
        let s0 = (smoothstep(h) - smoothstep(0.0)) / h;
        let s1 = (smoothstep(1.0) - smoothstep(1.0 - h)) / h;
        assert!(s0.abs() < 1e-4);
        assert!(s1.abs() < 1e-4);
        assert_abs_diff_eq!(smoothstep_derivative(0.0), 0.0);
        assert_abs_diff_eq!(smoothstep_derivative(1.0), 0.0);
    }
}
