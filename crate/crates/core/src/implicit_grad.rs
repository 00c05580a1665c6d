//! Implicit gradients by differentiating the lower-level KKT system.
//!
//! On a neighbourhood where the active set `Ā` is fixed and strictly
//! complementary, `y*(x)` and the active multipliers `λ̄*(x)` are smooth with
//!
//! ```text
//! ∇λ̄* = -(Ā H⁻¹ Āᵀ)⁻¹ (Ā H⁻¹ M - B̄)
//! ∇y*  = H⁻¹ (-M - Āᵀ ∇λ̄*)
//! ```
//!
//! where `H = ∇²_yy g` and `M = ∇²_xy g` (as the `d_l x d_u` Jacobian of
//! `∇_y g` in `x`). The upper-level gradient is then
//! `∇F = ∇_x f + (∇y*)ᵀ ∇_y f`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{min_singular_value, select_rows};
use crate::lower_level::{sc_margin, LLSolution, LICQ_TOL};
use crate::problem::ProblemOracle;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("active constraint rows are rank deficient (smallest singular value {sigma_min:.3e})")]
    DegenerateActiveSet { sigma_min: f64 },
    #[error("strict complementarity fails (smallest active multiplier {margin:.3e})")]
    NoStrictComplementarity { margin: f64 },
    #[error("lower-level Hessian is not positive definite")]
    NotSpd,
    #[error("component index {index} out of range for {count} components")]
    InvalidComponent { index: usize, count: usize },
}

/// `∇F_q(x)` together with the Jacobians it was assembled from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitGradient {
    pub grad: DVector<f64>,
    /// `∇y*_q(x)`, `d_l x d_u`.
    pub jac_y: DMatrix<f64>,
    /// `∇λ̄*_q(x)`, `|active| x d_u`, rows in active-set order.
    pub jac_lambda: DMatrix<f64>,
    /// Built from an inexact lower-level solution.
    pub used_approx: bool,
    /// Upper-level component used, if sampled.
    pub component: Option<usize>,
}

/// `(∇y*, ∇λ̄*)` at `(x, sol.y)` for the active rows of `sol`.
pub fn jacobians<O: ProblemOracle + ?Sized>(
    oracle: &O,
    x: &DVector<f64>,
    sol: &LLSolution,
) -> Result<(DMatrix<f64>, DMatrix<f64>), GradError> {
    let margin = sc_margin(sol);
    if !(margin > 0.0) {
        return Err(GradError::NoStrictComplementarity { margin });
    }
    jacobians_on_rows(oracle, x, &sol.y, &sol.active_set)
}

/// Jacobians for an explicit list of active rows (in any order).
pub fn jacobians_on_rows<O: ProblemOracle + ?Sized>(
    oracle: &O,
    x: &DVector<f64>,
    y: &DVector<f64>,
    rows: &[usize],
) -> Result<(DMatrix<f64>, DMatrix<f64>), GradError> {
    let h = oracle.hess_yy_g(x, y);
    let m = oracle.jac_xy_g(x, y);
    let chol = h.cholesky().ok_or(GradError::NotSpd)?;
    let hinv_m = chol.solve(&m);
    if rows.is_empty() {
        return Ok((-hinv_m, DMatrix::zeros(0, oracle.dim_x())));
    }
    let cons = oracle.constraints();
    let a_bar = select_rows(&cons.a, rows);
    let b_bar = select_rows(&cons.b, rows);
    let sigma_min = min_singular_value(&a_bar);
    if sigma_min < LICQ_TOL {
        return Err(GradError::DegenerateActiveSet { sigma_min });
    }
    let hinv_at = chol.solve(&a_bar.transpose());
    let schur = &a_bar * &hinv_at;
    let rhs = &a_bar * &hinv_m - b_bar;
    let jac_lambda = -schur
        .lu()
        .solve(&rhs)
        .ok_or(GradError::DegenerateActiveSet { sigma_min })?;
    let jac_y = -hinv_m - hinv_at * &jac_lambda;
    Ok((jac_y, jac_lambda))
}

fn assemble(
    jac_y: DMatrix<f64>,
    jac_lambda: DMatrix<f64>,
    grads: (DVector<f64>, DVector<f64>),
    sol: &LLSolution,
    component: Option<usize>,
) -> ImplicitGradient {
    let (gx, gy) = grads;
    let grad = gx + jac_y.tr_mul(&gy);
    ImplicitGradient {
        grad,
        jac_y,
        jac_lambda,
        used_approx: sol.delta_cert > 0.0,
        component,
    }
}

/// Full-batch implicit gradient at the lower-level solution `sol`.
pub fn implicit_gradient<O: ProblemOracle + ?Sized>(
    oracle: &O,
    x: &DVector<f64>,
    sol: &LLSolution,
) -> Result<ImplicitGradient, GradError> {
    let (jy, jl) = jacobians(oracle, x, sol)?;
    Ok(assemble(jy, jl, oracle.grad_f(x, &sol.y), sol, None))
}

/// Implicit gradient of upper-level component `xi`.
pub fn sampled_implicit_gradient<O: ProblemOracle + ?Sized>(
    oracle: &O,
    x: &DVector<f64>,
    sol: &LLSolution,
    xi: usize,
) -> Result<ImplicitGradient, GradError> {
    let count = oracle.num_components();
    if xi >= count {
        return Err(GradError::InvalidComponent { index: xi, count });
    }
    let (jy, jl) = jacobians(oracle, x, sol)?;
    Ok(assemble(jy, jl, oracle.sampled_grad_f(x, &sol.y, xi), sol, Some(xi)))
}

/// `|Ā ∇y* + B̄|_F` over the active rows of `sol`.
pub fn tangency_residual<O: ProblemOracle + ?Sized>(oracle: &O, sol: &LLSolution, jac_y: &DMatrix<f64>) -> f64 {
    let cons = oracle.constraints();
    let a_bar = select_rows(&cons.a, &sol.active_set);
    let b_bar = select_rows(&cons.b, &sol.active_set);
    (a_bar * jac_y + b_bar).norm()
}

/// Per-coordinate mean and variance of the sampled gradients over all
/// components.
pub fn component_spread<O: ProblemOracle + ?Sized>(
    oracle: &O,
    x: &DVector<f64>,
    sol: &LLSolution,
) -> Result<(DVector<f64>, DVector<f64>), GradError> {
    let n = oracle.num_components();
    let (jy, _) = jacobians(oracle, x, sol)?;
    let samples: Vec<DVector<f64>> = (0..n)
        .map(|xi| {
            let (gx, gy) = oracle.sampled_grad_f(x, &sol.y, xi);
            gx + jy.tr_mul(&gy)
        })
        .collect();
    let mean = samples.iter().fold(DVector::zeros(oracle.dim_x()), |acc, g| acc + g) / n as f64;
    let var = samples
        .iter()
        .fold(DVector::zeros(oracle.dim_x()), |acc, g| acc + (g - &mean).map(|v| v * v))
        / n as f64;
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lower_level::{solve_ll_oracle, solve_ll_quadratic, PgdOptions, Perturbation};
    use crate::problem::{generate, GeneratorConfig, InstanceMeta, LinearTerm, LowerQuadratic, Polyhedron, QuadraticBilevel, UpperQuadratic};
    use rand::{Rng as _, SeedableRng};

    /// `g = (y - x)^2`, `y <= 0`, upper level `f = wx x^2 + y^2`.
    fn kinked(x_weight: f64) -> QuadraticBilevel {
        let upper = UpperQuadratic::new(
            x_weight,
            1.0,
            DMatrix::zeros(1, 1),
            vec![LinearTerm {
                x: DVector::zeros(1),
                y: DVector::zeros(1),
            }],
        )
        .unwrap();
        let lower = LowerQuadratic {
            x_weight: 1.0,
            y_weight: 1.0,
            coupling: DMatrix::from_element(1, 1, -2.0),
            y_linear: DVector::zeros(1),
        };
        let cons = Polyhedron::new(DMatrix::from_element(1, 1, 1.0), DMatrix::zeros(1, 1), DVector::zeros(1)).unwrap();
        let meta = InstanceMeta {
            seed: None,
            generator_version: 0,
            distribution: "hand".into(),
            random_rows: 1,
            box_radius: None,
        };
        QuadraticBilevel::new(upper, lower, cons, meta).unwrap()
    }

    fn at(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn hand_checked_active_branch() {
        let inst = kinked(0.0);
        let sol = solve_ll_quadratic(&inst, &at(1.0), &Perturbation::zero(1)).unwrap();
        assert_eq!(sol.active_set, vec![0]);
        assert!((sol.lambda[0] - 2.0).abs() < 1e-14);
        let (jy, jl) = jacobians(&inst, &at(1.0), &sol).unwrap();
        assert!((jl[(0, 0)] - 2.0).abs() < 1e-14);
        assert!(jy[(0, 0)].abs() < 1e-14);
        let g = implicit_gradient(&inst, &at(1.0), &sol).unwrap();
        assert!(g.grad[0].abs() < 1e-14);
        assert!(!g.used_approx);
    }

    #[test]
    fn hand_checked_inactive_branch() {
        let inst = kinked(0.0);
        let sol = solve_ll_quadratic(&inst, &at(-1.0), &Perturbation::zero(1)).unwrap();
        assert!(sol.active_set.is_empty());
        let (jy, jl) = jacobians(&inst, &at(-1.0), &sol).unwrap();
        assert!((jy[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(jl.nrows(), 0);
        let g = implicit_gradient(&inst, &at(-1.0), &sol).unwrap();
        assert!((g.grad[0] + 2.0).abs() < 1e-14);
    }

    #[test]
    fn weakly_active_row_is_rejected() {
        let inst = kinked(0.0);
        // At x = 0 the unconstrained minimizer sits on the boundary.
        let sol = solve_ll_quadratic(&inst, &at(0.0), &Perturbation::zero(1)).unwrap();
        assert_eq!(sol.active_set, vec![0]);
        assert!(matches!(
            implicit_gradient(&inst, &at(0.0), &sol),
            Err(GradError::NoStrictComplementarity { .. })
        ));
    }

    fn random_active_points(inst: &QuadraticBilevel, seed: u64, count: usize) -> Vec<(DVector<f64>, LLSolution)> {
        let mut rng = crate::rng::Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < count {
            let x = DVector::from_fn(inst.dim_x(), |_, _| rng.random_range(-1.0..0.3));
            if let Ok(sol) = solve_ll_quadratic(inst, &x, &Perturbation::zero(inst.dim_y())) {
                if !sol.active_set.is_empty() && sc_margin(&sol) > 1e-6 {
                    out.push((x, sol));
                }
            }
        }
        out
    }

    #[test]
    fn tangency_holds_on_active_rows() {
        let inst = generate(&GeneratorConfig::new(10, 10, 5, 1)).unwrap();
        for (x, sol) in random_active_points(&inst, 5, 20) {
            let (jy, _) = jacobians(&inst, &x, &sol).unwrap();
            assert!(tangency_residual(&inst, &sol, &jy) <= 1e-8);
        }
    }

    #[test]
    fn invariant_under_active_row_order() {
        let inst = generate(&GeneratorConfig::new(8, 6, 6, 4)).unwrap();
        for (x, sol) in random_active_points(&inst, 9, 10) {
            let mut rev = sol.active_set.clone();
            rev.reverse();
            let (a, _) = jacobians_on_rows(&inst, &x, &sol.y, &sol.active_set).unwrap();
            let (b, _) = jacobians_on_rows(&inst, &x, &sol.y, &rev).unwrap();
            assert!((a - b).amax() <= 1e-12);
        }
    }

    #[test]
    fn single_component_sample_matches_full() {
        let inst = generate(&GeneratorConfig::new(5, 5, 3, 2)).unwrap();
        for (x, sol) in random_active_points(&inst, 1, 5) {
            let full = implicit_gradient(&inst, &x, &sol).unwrap();
            let one = sampled_implicit_gradient(&inst, &x, &sol, 0).unwrap();
            assert_eq!(full.grad, one.grad);
            assert_eq!(one.component, Some(0));
            assert!(matches!(
                sampled_implicit_gradient(&inst, &x, &sol, 1),
                Err(GradError::InvalidComponent { .. })
            ));
        }
    }

    #[test]
    fn component_mean_and_variance() {
        let inst = generate(&GeneratorConfig {
            components: 8,
            ..GeneratorConfig::new(6, 6, 4, 3)
        })
        .unwrap();
        for (x, sol) in random_active_points(&inst, 2, 5) {
            let full = implicit_gradient(&inst, &x, &sol).unwrap();
            let (mean, var) = component_spread(&inst, &x, &sol).unwrap();
            assert!((mean - &full.grad).amax() <= 1e-12);
            assert!(var.iter().all(|v| v.is_finite() && *v > 0.0));
        }
    }

    #[test]
    fn approximate_solution_bias_shrinks_with_tolerance() {
        let inst = generate(&GeneratorConfig::new(6, 6, 4, 8)).unwrap();
        for (x, exact) in random_active_points(&inst, 4, 5) {
            let truth = implicit_gradient(&inst, &x, &exact).unwrap().grad;
            let mut last = f64::INFINITY;
            for tol in [1e-2, 1e-4, 1e-6] {
                let approx = solve_ll_oracle(&inst, &x, &Perturbation::zero(6), tol, &PgdOptions::default()).unwrap();
                let g = implicit_gradient(&inst, &x, &approx).unwrap();
                let bias = (&g.grad - &truth).norm();
                assert!(bias <= last + 1e-15);
                last = bias;
            }
        }
    }
}
