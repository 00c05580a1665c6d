//! Lower-level solves of the perturbed problem
//!
//! ```text
//! min_y g(x, y) + q^T y   s.t.   A y + B x <= b
//! ```
//!
//! Two routes produce an [`LLSolution`]: an exact active-set QP solve for
//! quadratic lower levels and projected gradient descent against a generic
//! [`ProblemOracle`], whose projections are themselves exact QP solves.

pub mod qp;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rand::Rng as _;
use thiserror::Error;

use crate::linalg::{min_eigenvalue, min_singular_value, select_rows};
use crate::problem::{ProblemOracle, QuadraticBilevel};
use crate::rng::Rng;
pub use qp::{DenseQp, QpError, QpOptions, QpSolution};

/// Rows with slack at most this are reported active on the projected
/// gradient route.
pub const ACTIVE_TOL: f64 = 1e-7;
/// Relative slack, `slack <= EXACT_ACTIVE_TOL (1 + |r_i|)`, below which the
/// exact route reports a row active even when it left the working set.
pub const EXACT_ACTIVE_TOL: f64 = 1e-12;
/// Largest constraint violation accepted on return.
pub const FEAS_TOL: f64 = 1e-9;
/// Smallest singular value of the active rows accepted on return.
pub const LICQ_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LowerLevelError {
    #[error("lower-level problem is infeasible at this x (violation {violation:.3e})")]
    Infeasible { violation: f64 },
    #[error("lower-level problem is unbounded")]
    Unbounded,
    #[error("active-set solver hit its pivot limit ({pivots})")]
    MaxPivots { pivots: usize },
    #[error("projected gradient hit its iteration limit ({iterations}); best certified distance {best_delta:.3e}")]
    MaxIter { iterations: usize, best_delta: f64 },
    #[error("active constraint rows are rank deficient (smallest singular value {sigma_min:.3e})")]
    DegenerateActiveSet { sigma_min: f64 },
    #[error("lower-level Hessian is not positive definite (min eigenvalue {min_eig:.3e})")]
    NotSpd { min_eig: f64 },
    #[error("perturbation radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

impl From<QpError> for LowerLevelError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::NotSpd => LowerLevelError::NotSpd { min_eig: f64::NAN },
            QpError::Infeasible { violation, .. } => LowerLevelError::Infeasible { violation },
            QpError::MaxPivots { pivots } => LowerLevelError::MaxPivots { pivots },
            QpError::Dimension(s) => LowerLevelError::Dimension(s),
        }
    }
}

/// Random linear term `q^T y` added to the lower-level objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub q: DVector<f64>,
    pub radius: f64,
}

impl Perturbation {
    pub fn zero(dim: usize) -> Self {
        Perturbation {
            q: DVector::zeros(dim),
            radius: 0.0,
        }
    }

    pub fn norm(&self) -> f64 {
        self.q.norm()
    }
}

/// Uniform draw from the closed Euclidean ball of the given radius.
pub fn sample_perturbation(radius: f64, dim: usize, rng: &mut Rng) -> Result<Perturbation, LowerLevelError> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(LowerLevelError::InvalidRadius(radius));
    }
    let mut dir = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
    let n = dir.norm();
    if n > 0.0 {
        dir /= n;
    }
    let u: f64 = rng.random();
    let scale = radius * u.powf(1.0 / dim as f64);
    Ok(Perturbation { q: dir * scale, radius })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveStats {
    pub pivots: usize,
    pub iterations: usize,
}

/// Lower-level primal/dual pair with its certificates.
#[derive(Debug, Clone, PartialEq)]
pub struct LLSolution {
    pub y: DVector<f64>,
    /// One multiplier per constraint row, zero off the active set.
    pub lambda: DVector<f64>,
    /// Sorted indices of active rows.
    pub active_set: Vec<usize>,
    /// `|∇_y g_q(x, y) + Ā^T λ̄|`.
    pub kkt_residual: f64,
    /// `max_i (A y + B x - b)_i`; nonpositive means feasible.
    pub max_violation: f64,
    /// Certified bound on the distance to the exact solution.
    pub delta_cert: f64,
    pub stats: SolveStats,
}

impl LLSolution {
    pub fn active_lambda(&self) -> DVector<f64> {
        DVector::from_iterator(self.active_set.len(), self.active_set.iter().map(|&i| self.lambda[i]))
    }
}

/// Smallest active multiplier, `+inf` with no active rows.
pub fn sc_margin(sol: &LLSolution) -> f64 {
    sol.active_set
        .iter()
        .map(|&i| sol.lambda[i])
        .fold(f64::INFINITY, f64::min)
}

/// Whether two solutions identify the same active set.
pub fn certify_active_set(exact: &LLSolution, approx: &LLSolution) -> bool {
    exact.active_set == approx.active_set
}

/// Minimum slack over inactive rows, `+inf` when every row is active.
pub fn inactive_slack(oracle: &(impl ProblemOracle + ?Sized), x: &DVector<f64>, sol: &LLSolution) -> f64 {
    let slack = oracle.constraints().slacks(x, &sol.y);
    (0..slack.len())
        .filter(|i| sol.active_set.binary_search(i).is_err())
        .map(|i| slack[i])
        .fold(f64::INFINITY, f64::min)
}

fn check_dims<O: ProblemOracle + ?Sized>(oracle: &O, x: &DVector<f64>, q: &Perturbation) -> Result<(), LowerLevelError> {
    if x.len() != oracle.dim_x() || q.q.len() != oracle.dim_y() {
        return Err(LowerLevelError::Dimension(format!(
            "x has length {}, q has length {}; expected {} and {}",
            x.len(),
            q.q.len(),
            oracle.dim_x(),
            oracle.dim_y()
        )));
    }
    Ok(())
}

/// Builds the certificate fields from a primal point and multipliers on a
/// given set of active rows.
#[allow(clippy::too_many_arguments)]
fn finish<O: ProblemOracle + ?Sized>(
    oracle: &O,
    x: &DVector<f64>,
    q: &Perturbation,
    y: DVector<f64>,
    lambda: DVector<f64>,
    active_set: Vec<usize>,
    delta_cert: f64,
    stats: SolveStats,
) -> Result<LLSolution, LowerLevelError> {
    let cons = oracle.constraints();
    let a_bar = select_rows(&cons.a, &active_set);
    let sigma_min = min_singular_value(&a_bar);
    if sigma_min < LICQ_TOL {
        return Err(LowerLevelError::DegenerateActiveSet { sigma_min });
    }
    let mut stationarity = oracle.grad_y_g(x, &y) + &q.q;
    stationarity += cons.a.tr_mul(&lambda);
    let max_violation = cons.max_violation(x, &y);
    if max_violation > FEAS_TOL {
        return Err(LowerLevelError::Infeasible { violation: max_violation });
    }
    Ok(LLSolution {
        kkt_residual: stationarity.norm(),
        max_violation,
        y,
        lambda,
        active_set,
        delta_cert,
        stats,
    })
}

/// Union of the solver's working set and every row with `slack <= tol(i)`.
fn tight_rows(slack: &DVector<f64>, working: &[usize], tol: impl Fn(usize) -> f64) -> Vec<usize> {
    (0..slack.len())
        .filter(|&i| slack[i] <= tol(i) || working.contains(&i))
        .collect()
}

/// Exact lower-level solver for a quadratic instance; the QP factorization
/// is computed once and reused across `(x, q)`.
#[derive(Debug, Clone)]
pub struct QuadraticLowerLevel<'a> {
    inst: &'a QuadraticBilevel,
    qp: DenseQp,
    pub options: QpOptions,
}

impl<'a> QuadraticLowerLevel<'a> {
    pub fn new(inst: &'a QuadraticBilevel) -> Result<Self, LowerLevelError> {
        let n = inst.dim_y();
        let h = inst.hess_yy_g(&DVector::zeros(inst.dim_x()), &DVector::zeros(n));
        let qp = DenseQp::new(h, inst.constraints.a.clone())?;
        Ok(QuadraticLowerLevel {
            inst,
            qp,
            options: QpOptions::default(),
        })
    }

    pub fn instance(&self) -> &'a QuadraticBilevel {
        self.inst
    }

    pub fn solve(&self, x: &DVector<f64>, q: &Perturbation) -> Result<LLSolution, LowerLevelError> {
        check_dims(self.inst, x, q)?;
        let lo = &self.inst.lower;
        let c = lo.coupling.tr_mul(x) + &lo.y_linear + &q.q;
        let r = self.inst.constraints.rhs_at(x);
        let sol = self.qp.solve(&c, &r, &self.options)?;
        let slack = &r - &self.inst.constraints.a * &sol.y;
        let active = tight_rows(&slack, &sol.working_set, |i| EXACT_ACTIVE_TOL * (1.0 + r[i].abs()));
        finish(
            self.inst,
            x,
            q,
            sol.y,
            sol.lambda,
            active,
            0.0,
            SolveStats {
                pivots: sol.pivots,
                iterations: 1,
            },
        )
    }
}

/// Exact solve of the quadratic lower level at `(x, q)`.
pub fn solve_ll_quadratic(inst: &QuadraticBilevel, x: &DVector<f64>, q: &Perturbation) -> Result<LLSolution, LowerLevelError> {
    QuadraticLowerLevel::new(inst)?.solve(x, q)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdOptions {
    pub max_iter: usize,
}

impl Default for PgdOptions {
    fn default() -> Self {
        PgdOptions { max_iter: 20_000 }
    }
}

/// Projected gradient descent with step `1/L_g` until the certified
/// distance to the exact solution drops below `tol_delta`.
///
/// With gradient mapping `G = L (y - P(y - ∇g_q(y)/L))`, strong convexity
/// gives `|P(...) - y*| <= |y - y*| <= 2 |G| / μ`, which is the certificate.
/// Multipliers are recovered by nonnegative least squares on the rows that
/// are tight at the returned point.
pub fn solve_ll_oracle<O: ProblemOracle + ?Sized>(
    oracle: &O,
    x: &DVector<f64>,
    q: &Perturbation,
    tol_delta: f64,
    opts: &PgdOptions,
) -> Result<LLSolution, LowerLevelError> {
    if !(tol_delta > 0.0) {
        return Err(LowerLevelError::InvalidTolerance(tol_delta));
    }
    check_dims(oracle, x, q)?;
    let cons = oracle.constraints();
    let n = oracle.dim_y();
    let (mu, lip) = (oracle.mu_g(), oracle.lipschitz_g());
    let projector = DenseQp::new(DMatrix::identity(n, n), cons.a.clone())?;
    let r = cons.rhs_at(x);
    let qp_opts = QpOptions::default();
    let project = |z: &DVector<f64>| -> Result<QpSolution, LowerLevelError> { Ok(projector.solve(&(-z), &r, &qp_opts)?) };

    let mut y = project(&DVector::zeros(n))?.y;
    let mut best = f64::INFINITY;
    let mut pivots = 0;
    for it in 1..=opts.max_iter {
        debug_assert!(min_eigenvalue(&oracle.hess_yy_g(x, &y)) >= mu * (1.0 - 1e-12));
        let grad = oracle.grad_y_g(x, &y) + &q.q;
        let step = project(&(&y - grad / lip))?;
        pivots += step.pivots;
        let cert = 2.0 * lip * (&step.y - &y).norm() / mu;
        best = best.min(cert);
        y = step.y;
        if cert <= tol_delta {
            let slack = cons.slacks(x, &y);
            let active = tight_rows(&slack, &[], |_| ACTIVE_TOL);
            let lambda = recover_duals(oracle, x, q, &y, &active);
            return finish(
                oracle,
                x,
                q,
                y,
                lambda,
                active,
                cert,
                SolveStats { pivots, iterations: it },
            );
        }
    }
    Err(LowerLevelError::MaxIter {
        iterations: opts.max_iter,
        best_delta: best,
    })
}

/// Least-squares `Ā^T λ̄ = -∇_y g_q(x, y)` clamped at zero, scattered into a
/// full-length multiplier vector.
fn recover_duals<O: ProblemOracle + ?Sized>(
    oracle: &O,
    x: &DVector<f64>,
    q: &Perturbation,
    y: &DVector<f64>,
    active: &[usize],
) -> DVector<f64> {
    let cons = oracle.constraints();
    let mut lambda = DVector::zeros(cons.num_rows());
    if active.is_empty() {
        return lambda;
    }
    let a_bar = select_rows(&cons.a, active);
    let rhs = -(oracle.grad_y_g(x, y) + &q.q);
    let normal = &a_bar * a_bar.transpose();
    let sol = normal
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&(&a_bar * &rhs)))
        .unwrap_or_else(|| {
            a_bar
                .transpose()
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .expect("svd computed with both factors")
        });
    for (k, &i) in active.iter().enumerate() {
        lambda[i] = sol[k].max(0.0);
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{generate_instance, InstanceMeta, LinearTerm, LowerQuadratic, Polyhedron, UpperQuadratic};
    use crate::rng::{self, Stream};
    use rand::SeedableRng;

    /// `g = y^2 - 2y` (as `w=1`, `h=-2`, no coupling) with `y <= bound`.
    fn scalar(bound: Option<f64>) -> QuadraticBilevel {
        let constraints = match bound {
            Some(b) => Polyhedron::new(
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::zeros(1, 1),
                DVector::from_element(1, b),
            )
            .unwrap(),
            None => Polyhedron::unconstrained(1, 1),
        };
        let upper = UpperQuadratic::new(
            1.0,
            1.0,
            DMatrix::zeros(1, 1),
            vec![LinearTerm {
                x: DVector::zeros(1),
                y: DVector::zeros(1),
            }],
        )
        .unwrap();
        let lower = LowerQuadratic {
            x_weight: 0.0,
            y_weight: 1.0,
            coupling: DMatrix::zeros(1, 1),
            y_linear: DVector::from_element(1, -2.0),
        };
        let meta = InstanceMeta {
            seed: None,
            generator_version: 0,
            distribution: "hand".into(),
            random_rows: 1,
            box_radius: None,
        };
        QuadraticBilevel::new(upper, lower, constraints, meta).unwrap()
    }

    fn zero_x() -> DVector<f64> {
        DVector::zeros(1)
    }

    #[test]
    fn hand_solvable_active_case() {
        let inst = scalar(Some(0.5));
        let sol = solve_ll_quadratic(&inst, &zero_x(), &Perturbation::zero(1)).unwrap();
        assert!((sol.y[0] - 0.5).abs() < 1e-15);
        assert_eq!(sol.active_set, vec![0]);
        assert!((sol.lambda[0] - 1.0).abs() < 1e-14);
        assert_eq!(sc_margin(&sol), sol.lambda[0]);
        assert!(sol.kkt_residual <= 1e-10);
    }

    #[test]
    fn hand_solvable_interior_case() {
        let inst = scalar(Some(2.0));
        let sol = solve_ll_quadratic(&inst, &zero_x(), &Perturbation::zero(1)).unwrap();
        assert!((sol.y[0] - 1.0).abs() < 1e-15);
        assert!(sol.active_set.is_empty());
        assert_eq!(sol.lambda[0], 0.0);
        assert_eq!(sc_margin(&sol), f64::INFINITY);
    }

    #[test]
    fn perturbation_support_and_mean() {
        let mut rng = rng::stream(3, Stream::Perturbation);
        let n = 10_000;
        let mut sum = DVector::zeros(2);
        for _ in 0..n {
            let p = sample_perturbation(1e-3, 2, &mut rng).unwrap();
            assert!(p.norm() <= 1e-3);
            sum += p.q;
        }
        // Uniform on the disk of radius r: per-coordinate variance r^2/4.
        let sigma = (1e-6f64 / 4.0 / n as f64).sqrt();
        let mean = sum / n as f64;
        assert!(mean.iter().all(|m| m.abs() <= 3.0 * sigma), "{mean}");
        assert!(matches!(
            sample_perturbation(0.0, 2, &mut rng),
            Err(LowerLevelError::InvalidRadius(_))
        ));
    }

    #[test]
    fn oracle_path_unconstrained_converges_to_center() {
        let inst = scalar(None);
        let sol = solve_ll_oracle(&inst, &zero_x(), &Perturbation::zero(1), 1e-10, &PgdOptions::default()).unwrap();
        assert!((sol.y[0] - 1.0).abs() <= 1e-10);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn oracle_path_matches_exact_path() {
        let inst = generate_instance(6, 5, 4, 3).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let exact_ll = QuadraticLowerLevel::new(&inst).unwrap();
        for _ in 0..10 {
            let x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..0.5));
            let q = sample_perturbation(1e-3, 5, &mut rng).unwrap();
            let exact = exact_ll.solve(&x, &q).unwrap();
            for tol in [1e-2, 1e-8] {
                let approx = solve_ll_oracle(&inst, &x, &q, tol, &PgdOptions::default()).unwrap();
                assert!(approx.max_violation <= FEAS_TOL);
                assert!((&approx.y - &exact.y).norm() <= tol);
                assert!(approx.delta_cert <= tol);
                if tol <= 1e-8 {
                    assert!(certify_active_set(&exact, &approx));
                    assert!(approx.kkt_residual <= inst.mu_g() * tol);
                }
            }
        }
    }

    #[test]
    fn infeasible_point_is_reported() {
        let inst = generate_instance(3, 2, 2, 1).unwrap();
        // Large positive x drives b - Bx below what the box allows.
        let x = DVector::from_element(3, 1e3);
        let err = solve_ll_quadratic(&inst, &x, &Perturbation::zero(2)).unwrap_err();
        assert!(matches!(err, LowerLevelError::Infeasible { .. }));
    }

    #[test]
    fn certify_active_set_compares_indices() {
        let inst = scalar(Some(0.5));
        let a = solve_ll_quadratic(&inst, &zero_x(), &Perturbation::zero(1)).unwrap();
        assert!(certify_active_set(&a, &a.clone()));
        let mut b = a.clone();
        b.active_set = vec![];
        assert!(!certify_active_set(&a, &b));
        let mut c = a.clone();
        c.active_set = vec![1, 3];
        let mut d = a;
        d.active_set = vec![1];
        assert!(!certify_active_set(&c, &d));
    }

    #[test]
    fn dimension_errors() {
        let inst = scalar(Some(1.0));
        let err = solve_ll_quadratic(&inst, &DVector::zeros(2), &Perturbation::zero(1)).unwrap_err();
        assert!(matches!(err, LowerLevelError::Dimension(_)));
        assert!(matches!(
            solve_ll_oracle(&inst, &zero_x(), &Perturbation::zero(1), 0.0, &PgdOptions::default()),
            Err(LowerLevelError::InvalidTolerance(_))
        ));
    }
}
