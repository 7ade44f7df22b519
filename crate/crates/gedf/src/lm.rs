//! Damped Gauss-Newton (Levenberg-Marquardt) solver with analytical
//! Jacobians. Used both by the per-block kernel fitter and by scan-to-map
//! registration; the latter supplies a manifold retraction.

use nalgebra::{DMatrix, DVector};

/// Problem interface for [`lm_solve`]. Cost is the plain sum of squared
/// residuals.
pub trait LeastSquaresProblem {
    fn residuals(&self, params: &DVector<f64>) -> DVector<f64>;

    /// Analytical Jacobian `dr/dparams`. Only ever evaluated at retracted
    /// parameter vectors.
    fn jacobian(&self, params: &DVector<f64>) -> DMatrix<f64>;

    /// Invoked after every accepted step. Implementations may clamp bounded
    /// parameters or fold a local manifold increment back into internal state
    /// (zeroing the corresponding components).
    fn retract(&mut self, _params: &mut DVector<f64>) {}
}

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Relative cost decrease below which iteration stops.
    pub cost_tolerance: f64,
    /// Infinity norm of the gradient below which iteration stops.
    pub gradient_tolerance: f64,
    /// Norm of an accepted step below which iteration stops.
    pub step_tolerance: f64,
    pub max_damping: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-4,
            cost_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-8,
            max_damping: 1e12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Classic LM iteration: solve `(J^T J + lambda * diag(J^T J)) dx = -J^T r`,
/// accept the step if the cost decreases (damping x0.5), otherwise grow the
/// damping x4 and retry. Normal-equations failure at maximum damping yields
/// `converged = false` with the best parameters seen so far.
pub fn lm_solve<P: LeastSquaresProblem>(
    problem: &mut P,
    initial: DVector<f64>,
    cfg: &LmConfig,
) -> LmResult {
    let mut params = initial;
    let mut residuals = problem.residuals(&params);
    let mut cost = residuals.norm_squared();

    if cost == 0.0 {
        return LmResult { params, cost, iterations: 0, converged: true };
    }

    let mut damping = cfg.initial_damping;
    let mut iterations = 0;

    for _ in 0..cfg.max_iterations {
        let jac = problem.jacobian(&params);
        let gradient = jac.tr_mul(&residuals);
        if gradient.amax() < cfg.gradient_tolerance {
            return LmResult { params, cost, iterations, converged: true };
        }
        let hess = jac.tr_mul(&jac);

        // inner damping loop: escalate until a step is accepted
        let (accepted_cost, step_norm) = loop {
            let mut damped = hess.clone();
            for i in 0..damped.nrows() {
                let d = hess[(i, i)].max(1e-12);
                damped[(i, i)] = hess[(i, i)] + damping * d;
            }
            let step = match damped.cholesky() {
                Some(chol) => chol.solve(&(-&gradient)),
                None => {
                    damping *= 4.0;
                    if damping > cfg.max_damping {
                        return LmResult { params, cost, iterations, converged: false };
                    }
                    continue;
                }
            };
            let mut candidate = &params + &step;
            let cand_res = problem.residuals(&candidate);
            let cand_cost = cand_res.norm_squared();
            if cand_cost.is_finite() && cand_cost < cost {
                problem.retract(&mut candidate);
                // retraction may clamp; keep the state consistent with it
                let res = problem.residuals(&candidate);
                let c = res.norm_squared();
                params = candidate;
                residuals = res;
                let prev = cost;
                cost = c;
                damping = (damping * 0.5).max(1e-16);
                break (prev, step.norm());
            }
            // a rejected step this small means we are pinned at a minimum
            if step.norm() < cfg.step_tolerance {
                return LmResult { params, cost, iterations, converged: true };
            }
            damping *= 4.0;
            if damping > cfg.max_damping {
                return LmResult { params, cost, iterations, converged: false };
            }
        };

        iterations += 1;
        let rel_change = (accepted_cost - cost) / accepted_cost.max(f64::MIN_POSITIVE);
        if rel_change < cfg.cost_tolerance || step_norm < cfg.step_tolerance {
            return LmResult { params, cost, iterations, converged: true };
        }
    }

    LmResult { params, cost, iterations, converged: true }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct LinearProblem {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl LeastSquaresProblem for LinearProblem {
        fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
            &self.a * p - &self.b
        }
        fn jacobian(&self, _p: &DVector<f64>) -> DMatrix<f64> {
            self.a.clone()
        }
    }

    #[test]
    fn linear_problem_converges_to_normal_equations() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.5, 2.0, 1.0]);
        let b = DVector::from_row_slice(&[1.0, 2.0, 0.3, -1.0]);
        let exact = (a.tr_mul(&a)).cholesky().unwrap().solve(&a.tr_mul(&b));
        let mut problem = LinearProblem { a, b };
        let result = lm_solve(&mut problem, DVector::zeros(2), &LmConfig::default());
        assert!(result.converged);
        assert!(result.iterations <= 2, "took {} accepted steps", result.iterations);
        assert!((result.params - exact).norm() < 1e-8);
    }

    struct Rosenbrock;

    impl LeastSquaresProblem for Rosenbrock {
        fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
            DVector::from_row_slice(&[10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]])
        }
        fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[-20.0 * p[0], 10.0, -1.0, 0.0])
        }
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        let cfg = LmConfig { max_iterations: 200, cost_tolerance: 0.0, ..Default::default() };
        let result = lm_solve(&mut Rosenbrock, DVector::from_row_slice(&[-1.2, 1.0]), &cfg);
        assert!(result.cost < 1e-10, "final cost {}", result.cost);
    }

    #[test]
    fn zero_residual_start_returns_immediately() {
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_row_slice(&[1.0, -2.0]);
        let mut problem = LinearProblem { a, b: b.clone() };
        let result = lm_solve(&mut problem, b, &LmConfig::default());
        assert!(result.converged);
        assert_eq!(result.iterations, 0);
        assert_eq!(result.cost, 0.0);
    }

    #[test]
    fn accepted_costs_are_non_increasing() {
        struct Tracking {
            inner: Rosenbrock,
            history: Vec<f64>,
        }
        impl LeastSquaresProblem for Tracking {
            fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
                self.inner.residuals(p)
            }
            fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
                self.inner.jacobian(p)
            }
            fn retract(&mut self, params: &mut DVector<f64>) {
                self.history.push(self.inner.residuals(params).norm_squared());
            }
        }
        let mut problem = Tracking { inner: Rosenbrock, history: Vec::new() };
        let cfg = LmConfig { max_iterations: 200, cost_tolerance: 0.0, ..Default::default() };
        lm_solve(&mut problem, DVector::from_row_slice(&[-1.2, 1.0]), &cfg);
        for w in problem.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "cost increased: {} -> {}", w[0], w[1]);
        }
    }
}
