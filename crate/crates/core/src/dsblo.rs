//! DS-BLO outer loop and the plain implicit-gradient-descent baseline.
//!
//! Each DS-BLO iteration takes a normalized momentum step
//! `x_{t+1} = x_t - η_t m_t` with `η_t = 1/(γ₁|m_t| + γ₂)`, samples a point
//! `x̄_{t+1}` uniformly on the segment `[x_t, x_{t+1}]`, perturbs the lower
//! level with a fresh `q_{t+1}`, and folds the implicit gradient at
//! `x̄_{t+1}` into the momentum `m_{t+1} = β m_t + (1 - β) g_{t+1}`.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::implicit_grad::{implicit_gradient, sampled_implicit_gradient, GradError};
use crate::lower_level::{
    sample_perturbation, solve_ll_oracle, LLSolution, LowerLevelError, Perturbation, PgdOptions, QuadraticLowerLevel,
};
use crate::problem::{sample_component, ProblemOracle, QuadraticBilevel};
use crate::rng::{self, Rng, Stream};

/// Attempts at drawing a fresh `q` when the lower-level solution is degenerate.
pub const MAX_RESAMPLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("schedule infeasible: {0}")]
    Infeasible(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid run parameters: {0}")]
    InvalidParams(String),
    #[error("lower-level solve failed at iteration {t}: {source}")]
    LowerLevel { t: usize, source: LowerLevelError },
    #[error("implicit gradient failed at iteration {t}: {source}")]
    Gradient { t: usize, source: GradError },
    #[error("degenerate lower-level solution persisted after {MAX_RESAMPLES} resamples at iteration {t}: {last}")]
    Degenerate { t: usize, last: String },
    #[error("window displacement bound violated at iteration {t}: {sum} > {bound}")]
    WindowBound { t: usize, sum: f64, bound: f64 },
}

/// How `K, β, γ₁, γ₂, δ_y` are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleMode {
    /// Constants from the convergence analysis, driven by the variance
    /// bound `δ_v` and the Lipschitz bound `L̄_F`. `lf_delta` fills the
    /// `L_F · δ` slot of `δ_y` when known.
    Theory {
        delta_v: f64,
        lf_bar: f64,
        #[serde(default)]
        lf_delta: Option<f64>,
    },
    Manual {
        beta: f64,
        gamma1: f64,
        gamma2: f64,
        k: u64,
        delta_y: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientOption {
    /// Full-batch upper-level gradients.
    Deterministic,
    /// One (or `batch_size`) sampled upper-level components per iteration.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlMethod {
    /// Active-set QP, exact up to rounding.
    Exact,
    /// Projected gradient to tolerance `ll_tol`.
    ProjectedGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsbloParams {
    pub epsilon: f64,
    pub delta_bar: f64,
    pub mode: ScheduleMode,
    pub perturb_radius: f64,
    pub option: GradientOption,
    /// Number of recorded iterates `x_1..x_T`.
    pub iterations: usize,
    pub ll_tol: f64,
    pub ll_method: LlMethod,
    pub batch_size: usize,
    pub seed: u64,
    pub x0: Option<Vec<f64>>,
}

impl Default for DsbloParams {
    fn default() -> Self {
        DsbloParams {
            epsilon: 0.1,
            delta_bar: 0.5,
            mode: ScheduleMode::Manual {
                beta: 0.9,
                gamma1: 1.0,
                gamma2: 10.0,
                k: 10,
                delta_y: 1e-8,
            },
            perturb_radius: 1e-3,
            option: GradientOption::Deterministic,
            iterations: 100,
            ll_tol: 1e-8,
            ll_method: LlMethod::Exact,
            batch_size: 1,
            seed: 0,
            x0: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSchedule {
    pub beta: f64,
    pub k: u64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub delta_y: f64,
}

impl ResolvedSchedule {
    /// Radius `K/γ₁` of the ball containing every window of sampled points.
    pub fn window_radius(&self) -> f64 {
        self.k as f64 / self.gamma1
    }
}

/// Resolves the step-size and momentum constants.
pub fn schedule(params: &DsbloParams) -> Result<ResolvedSchedule, ScheduleError> {
    let fail = |msg: String| Err(ScheduleError::Infeasible(msg));
    match params.mode {
        ScheduleMode::Theory {
            delta_v,
            lf_bar,
            lf_delta,
        } => {
            let eps = params.epsilon;
            if !(eps > 0.0 && params.delta_bar > 0.0 && delta_v >= 0.0 && lf_bar > 0.0) {
                return fail("require ε > 0, δ̄ > 0, δ_v >= 0, L̄_F > 0".into());
            }
            let scale = delta_v + 2.0 * lf_bar;
            if eps > scale {
                return fail(format!("ε = {eps} exceeds δ_v + 2 L̄_F = {scale}"));
            }
            let var = delta_v * delta_v + 2.0 * lf_bar * lf_bar;
            if eps * eps > 480.0 * var {
                return fail(format!("ε² = {} exceeds 480 (δ_v² + 2 L̄_F²) = {}, so β < 1/2", eps * eps, 480.0 * var));
            }
            let deficit = eps * eps / (960.0 * var);
            let beta = 1.0 - deficit;
            // ln(1/β) without cancellation for β near 1.
            let log_inv_beta = -(-deficit).ln_1p();
            let k_real = (32.0 * scale / eps).ln() / log_inv_beta;
            let k = k_real.ceil();
            if !(k.is_finite() && k < u64::MAX as f64) {
                return fail(format!("window length K = {k_real} is not representable"));
            }
            let k = (k as u64).max(1);
            let gamma1 = k as f64 / params.delta_bar;
            let gamma2 = 4.0 * gamma1 * scale;
            let delta_y = (eps * eps / (1280.0 * scale))
                .min(2.0 * eps / 3.0)
                .min(lf_bar)
                .min(lf_delta.unwrap_or(f64::INFINITY));
            Ok(ResolvedSchedule {
                beta,
                k,
                gamma1,
                gamma2,
                delta_y,
            })
        }
        ScheduleMode::Manual {
            beta,
            gamma1,
            gamma2,
            k,
            delta_y,
        } => {
            if !(beta > 0.0 && beta < 1.0) {
                return fail(format!("β = {beta} must lie in (0, 1)"));
            }
            if !(gamma1 > 0.0 && gamma2 > 0.0) {
                return fail(format!("γ₁ = {gamma1}, γ₂ = {gamma2} must be positive"));
            }
            if k < 1 {
                return fail("K must be at least 1".into());
            }
            if !(delta_y > 0.0) {
                return fail(format!("δ_y = {delta_y} must be positive"));
            }
            Ok(ResolvedSchedule {
                beta,
                k,
                gamma1,
                gamma2,
                delta_y,
            })
        }
    }
}

/// `1 / (γ₁ |m| + γ₂)`.
pub fn step_size(m: &DVector<f64>, gamma1: f64, gamma2: f64) -> f64 {
    1.0 / (gamma1 * m.norm() + gamma2)
}

/// Something that returns lower-level solutions for a fixed problem.
pub trait LowerLevelSolver: Sync {
    fn oracle(&self) -> &dyn ProblemOracle;
    fn solve(&self, x: &DVector<f64>, q: &Perturbation) -> Result<LLSolution, LowerLevelError>;
}

impl LowerLevelSolver for QuadraticLowerLevel<'_> {
    fn oracle(&self) -> &dyn ProblemOracle {
        self.instance()
    }

    fn solve(&self, x: &DVector<f64>, q: &Perturbation) -> Result<LLSolution, LowerLevelError> {
        QuadraticLowerLevel::solve(self, x, q)
    }
}

/// Projected-gradient lower level against any oracle.
pub struct ProjectedGradientSolver<'a> {
    pub oracle: &'a dyn ProblemOracle,
    pub tol: f64,
    pub options: PgdOptions,
}

impl LowerLevelSolver for ProjectedGradientSolver<'_> {
    fn oracle(&self) -> &dyn ProblemOracle {
        self.oracle
    }

    fn solve(&self, x: &DVector<f64>, q: &Perturbation) -> Result<LLSolution, LowerLevelError> {
        solve_ll_oracle(self.oracle, x, q, self.tol, &self.options)
    }
}

/// One logged iterate. Record `t` holds `x_t`, the sampled point `x̄_t`, the
/// gradient `g_t` computed there, the momentum `m_t` after folding in `g_t`
/// and the step `η_t` used to leave `x_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub x_bar: Vec<f64>,
    /// Segment position of `x̄_t` on `[x_{t-1}, x_t]`; `None` for `t = 1`.
    pub segment: Option<f64>,
    pub q_norm: f64,
    pub eta: f64,
    pub m: Vec<f64>,
    pub m_norm: f64,
    pub grad: Vec<f64>,
    /// Unperturbed `F(x_t)`, when evaluated at this iterate.
    pub f_exact: Option<f64>,
    pub wall_time: f64,
    pub component: Option<usize>,
    pub resamples: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_s: f64,
    pub ll_solve_s: f64,
    pub outer_s: f64,
    /// Time spent on `F(x_t)` evaluations, excluded from the others.
    pub evaluation_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub algorithm: String,
    pub seed: u64,
    pub fingerprint: String,
    pub schedule: Option<ResolvedSchedule>,
    pub records: Vec<IterateRecord>,
    pub timings: Timings,
    pub resamples: usize,
    pub status: RunStatus,
}

impl RunLog {
    pub fn last(&self) -> Option<&IterateRecord> {
        self.records.last()
    }

    pub fn final_f(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.f_exact)
    }

    pub fn first_f(&self) -> Option<f64> {
        self.records.iter().find_map(|r| r.f_exact)
    }
}

/// Per-run callbacks.
#[derive(Default)]
pub struct RunHooks<'a> {
    pub progress: Option<&'a mut dyn FnMut(&IterateRecord)>,
    pub cancel: Option<&'a AtomicBool>,
    /// Evaluate the unperturbed `F(x_t)` at `t = 1`, every `n`-th iterate and
    /// the last one.
    pub eval_every: Option<usize>,
}

impl RunHooks<'_> {
    fn cancelled(&self) -> bool {
        self.cancel.is_some_and(|c| c.load(Ordering::Relaxed))
    }

    fn wants_eval(&self, t: usize, last: usize) -> bool {
        match self.eval_every {
            Some(n) if n > 0 => t == 1 || t % n == 0 || t == last,
            _ => false,
        }
    }
}

struct Clock {
    start: Instant,
    excluded: f64,
    ll: f64,
}

impl Clock {
    fn new() -> Self {
        Clock {
            start: Instant::now(),
            excluded: 0.0,
            ll: 0.0,
        }
    }

    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64() - self.excluded
    }

    fn timings(&self) -> Timings {
        let total = self.now();
        Timings {
            total_s: total,
            ll_solve_s: self.ll,
            outer_s: total - self.ll,
            evaluation_s: self.excluded,
        }
    }
}

struct Sampled {
    grad: DVector<f64>,
    q_norm: f64,
    component: Option<usize>,
    resamples: usize,
}

/// Gradient sampler shared by both algorithms: fresh `q`, lower-level solve,
/// implicit gradient, with resampling of `q` on degenerate solutions.
struct GradientSampler<'s> {
    solver: &'s dyn LowerLevelSolver,
    radius: f64,
    option: GradientOption,
    batch: usize,
    q_rng: Rng,
    xi_rng: Rng,
}

impl GradientSampler<'_> {
    fn sample(&mut self, x: &DVector<f64>, t: usize, clock: &mut Clock) -> Result<Sampled, RunError> {
        let oracle = self.solver.oracle();
        let mut last = String::new();
        for attempt in 0..=MAX_RESAMPLES {
            let q = sample_perturbation(self.radius, oracle.dim_y(), &mut self.q_rng)
                .map_err(|source| RunError::LowerLevel { t, source })?;
            let started = Instant::now();
            let solved = self.solver.solve(x, &q);
            clock.ll += started.elapsed().as_secs_f64();
            let sol = match solved {
                Ok(sol) => sol,
                Err(e @ LowerLevelError::DegenerateActiveSet { .. }) => {
                    last = e.to_string();
                    continue;
                }
                Err(source) => return Err(RunError::LowerLevel { t, source }),
            };
            let result = match self.option {
                GradientOption::Deterministic => implicit_gradient(oracle, x, &sol).map(|g| (g.grad, None)),
                GradientOption::Sampled => {
                    let mut acc = DVector::zeros(oracle.dim_x());
                    let mut first = None;
                    let mut failure = None;
                    for _ in 0..self.batch {
                        let xi = sample_component(oracle, &mut self.xi_rng);
                        first.get_or_insert(xi);
                        match sampled_implicit_gradient(oracle, x, &sol, xi) {
                            Ok(g) => acc += g.grad,
                            Err(e) => {
                                failure = Some(e);
                                break;
                            }
                        }
                    }
                    match failure {
                        Some(e) => Err(e),
                        None => Ok((acc / self.batch as f64, first)),
                    }
                }
            };
            match result {
                Ok((grad, component)) => {
                    return Ok(Sampled {
                        grad,
                        q_norm: q.norm(),
                        component,
                        resamples: attempt,
                    })
                }
                Err(e @ (GradError::DegenerateActiveSet { .. } | GradError::NoStrictComplementarity { .. })) => {
                    last = e.to_string();
                }
                Err(source) => return Err(RunError::Gradient { t, source }),
            }
        }
        Err(RunError::Degenerate { t, last })
    }
}

fn initial_point(x0: &Option<Vec<f64>>, dim: usize) -> Result<DVector<f64>, RunError> {
    match x0 {
        None => Ok(DVector::zeros(dim)),
        Some(v) if v.len() == dim => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(RunError::InvalidParams(format!(
            "initial point has length {}, expected {dim}",
            v.len()
        ))),
    }
}

fn eval_f_exact(solver: &dyn LowerLevelSolver, x: &DVector<f64>, t: usize) -> Result<f64, RunError> {
    let oracle = solver.oracle();
    let sol = solver
        .solve(x, &Perturbation::zero(oracle.dim_y()))
        .map_err(|source| RunError::LowerLevel { t, source })?;
    Ok(oracle.eval_f(x, &sol.y))
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// DS-BLO on a quadratic instance, with the lower-level route chosen by
/// `params.ll_method`.
pub fn run_dsblo(inst: &QuadraticBilevel, params: &DsbloParams, hooks: RunHooks<'_>) -> Result<RunLog, RunError> {
    match params.ll_method {
        LlMethod::Exact => {
            let ll = QuadraticLowerLevel::new(inst).map_err(|source| RunError::LowerLevel { t: 0, source })?;
            run_dsblo_with(&ll, &inst.fingerprint(), params, hooks)
        }
        LlMethod::ProjectedGradient => {
            let ll = ProjectedGradientSolver {
                oracle: inst,
                tol: params.ll_tol,
                options: PgdOptions::default(),
            };
            run_dsblo_with(&ll, &inst.fingerprint(), params, hooks)
        }
    }
}

/// DS-BLO against an arbitrary lower-level solver.
pub fn run_dsblo_with(
    solver: &dyn LowerLevelSolver,
    fingerprint: &str,
    params: &DsbloParams,
    mut hooks: RunHooks<'_>,
) -> Result<RunLog, RunError> {
    let sched = schedule(params)?;
    let big_t = params.iterations;
    if (big_t as u64) <= sched.k {
        return Err(RunError::InvalidParams(format!("T = {big_t} must exceed K = {}", sched.k)));
    }
    if !(params.perturb_radius > 0.0) {
        return Err(RunError::InvalidParams("perturbation radius must be positive".into()));
    }
    if params.batch_size == 0 {
        return Err(RunError::InvalidParams("batch size must be at least 1".into()));
    }
    let oracle = solver.oracle();
    let mut x = initial_point(&params.x0, oracle.dim_x())?;
    let mut seg_rng = rng::stream(params.seed, Stream::Segment);
    let mut sampler = GradientSampler {
        solver,
        radius: params.perturb_radius,
        option: params.option,
        batch: params.batch_size,
        q_rng: rng::stream(params.seed, Stream::Perturbation),
        xi_rng: rng::stream(params.seed, Stream::Component),
    };
    let mut clock = Clock::new();
    let mut records = Vec::with_capacity(big_t);
    let mut total_resamples = 0;

    let k = sched.k as usize;
    let bound = sched.window_radius();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(k + 1);
    let mut window_sum = 0.0;

    let mut x_bar = x.clone();
    let mut segment = None;
    let first = sampler.sample(&x_bar, 1, &mut clock)?;
    let mut m = first.grad.clone();
    let mut current = first;
    let mut status = RunStatus::Completed;

    for t in 1..=big_t {
        let eta = step_size(&m, sched.gamma1, sched.gamma2);
        let f_exact = if hooks.wants_eval(t, big_t) {
            let started = Instant::now();
            let f = eval_f_exact(solver, &x, t)?;
            clock.excluded += started.elapsed().as_secs_f64();
            Some(f)
        } else {
            None
        };
        total_resamples += current.resamples;
        let rec = IterateRecord {
            t,
            x: to_vec(&x),
            x_bar: to_vec(&x_bar),
            segment,
            q_norm: current.q_norm,
            eta,
            m: to_vec(&m),
            m_norm: m.norm(),
            grad: to_vec(&current.grad),
            f_exact,
            wall_time: clock.now(),
            component: current.component,
            resamples: current.resamples,
        };
        if let Some(cb) = hooks.progress.as_mut() {
            cb(&rec);
        }
        records.push(rec);

        // Σ_{j=t-K+1}^{t} η_j |m_j| bounds |x_{t-K+1} - x̄_i| for the next window.
        let travel = eta * m.norm();
        window.push_back(travel);
        window_sum += travel;
        if window.len() > k {
            window_sum -= window.pop_front().expect("nonempty");
        }
        let exact_sum: f64 = if window.len() == k { window.iter().sum() } else { window_sum };
        if exact_sum > bound * (1.0 + 1e-12) {
            return Err(RunError::WindowBound {
                t,
                sum: exact_sum,
                bound,
            });
        }

        if t == big_t {
            break;
        }
        if hooks.cancelled() {
            status = RunStatus::Cancelled;
            break;
        }
        let x_next = &x - &m * eta;
        let lambda: f64 = seg_rng.random();
        x_bar = &x * (1.0 - lambda) + &x_next * lambda;
        segment = Some(lambda);
        current = sampler.sample(&x_bar, t + 1, &mut clock)?;
        m = &m * sched.beta + &current.grad * (1.0 - sched.beta);
        x = x_next;
    }

    Ok(RunLog {
        algorithm: "dsblo".into(),
        seed: params.seed,
        fingerprint: fingerprint.to_string(),
        schedule: Some(sched),
        records,
        timings: clock.timings(),
        resamples: total_resamples,
        status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IgdParams {
    pub step: f64,
    pub iterations: usize,
    pub ll_tol: f64,
    pub perturb_radius: f64,
    pub ll_method: LlMethod,
    pub seed: u64,
    pub x0: Option<Vec<f64>>,
}

impl Default for IgdParams {
    fn default() -> Self {
        IgdParams {
            step: 0.05,
            iterations: 100,
            ll_tol: 1e-8,
            perturb_radius: 1e-3,
            ll_method: LlMethod::Exact,
            seed: 0,
            x0: None,
        }
    }
}

/// Inexact implicit gradient descent `x_{t+1} = x_t - step ∇̂F_{q_t}(x_t)`.
pub fn run_igd_baseline(inst: &QuadraticBilevel, params: &IgdParams, hooks: RunHooks<'_>) -> Result<RunLog, RunError> {
    match params.ll_method {
        LlMethod::Exact => {
            let ll = QuadraticLowerLevel::new(inst).map_err(|source| RunError::LowerLevel { t: 0, source })?;
            run_igd_with(&ll, &inst.fingerprint(), params, hooks)
        }
        LlMethod::ProjectedGradient => {
            let ll = ProjectedGradientSolver {
                oracle: inst,
                tol: params.ll_tol,
                options: PgdOptions::default(),
            };
            run_igd_with(&ll, &inst.fingerprint(), params, hooks)
        }
    }
}

pub fn run_igd_with(
    solver: &dyn LowerLevelSolver,
    fingerprint: &str,
    params: &IgdParams,
    mut hooks: RunHooks<'_>,
) -> Result<RunLog, RunError> {
    if !(params.step >= 0.0) {
        return Err(RunError::InvalidParams(format!("step {} must be nonnegative", params.step)));
    }
    if params.iterations == 0 {
        return Err(RunError::InvalidParams("at least one iteration is required".into()));
    }
    let oracle = solver.oracle();
    let mut x = initial_point(&params.x0, oracle.dim_x())?;
    let mut sampler = GradientSampler {
        solver,
        radius: params.perturb_radius,
        option: GradientOption::Deterministic,
        batch: 1,
        q_rng: rng::stream(params.seed, Stream::Perturbation),
        xi_rng: rng::stream(params.seed, Stream::Component),
    };
    let mut clock = Clock::new();
    let mut records = Vec::with_capacity(params.iterations);
    let mut total_resamples = 0;
    let mut status = RunStatus::Completed;
    for t in 1..=params.iterations {
        let s = sampler.sample(&x, t, &mut clock)?;
        let f_exact = if hooks.wants_eval(t, params.iterations) {
            let started = Instant::now();
            let f = eval_f_exact(solver, &x, t)?;
            clock.excluded += started.elapsed().as_secs_f64();
            Some(f)
        } else {
            None
        };
        total_resamples += s.resamples;
        let rec = IterateRecord {
            t,
            x: to_vec(&x),
            x_bar: to_vec(&x),
            segment: None,
            q_norm: s.q_norm,
            eta: params.step,
            m: to_vec(&s.grad),
            m_norm: s.grad.norm(),
            grad: to_vec(&s.grad),
            f_exact,
            wall_time: clock.now(),
            component: None,
            resamples: s.resamples,
        };
        if let Some(cb) = hooks.progress.as_mut() {
            cb(&rec);
        }
        records.push(rec);
        if hooks.cancelled() {
            status = RunStatus::Cancelled;
            break;
        }
        x -= &s.grad * params.step;
    }
    Ok(RunLog {
        algorithm: "igd".into(),
        seed: params.seed,
        fingerprint: fingerprint.to_string(),
        schedule: None,
        records,
        timings: clock.timings(),
        resamples: total_resamples,
        status,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::problem::{InstanceMeta, LinearTerm, LowerQuadratic, Polyhedron, UpperQuadratic};
    use nalgebra::DMatrix;

    /// `f = x² + y²`, `g = (y - x)²`, no constraints: `y*(x) = x`, `F = 2x²`.
    pub(crate) fn smooth_scalar() -> QuadraticBilevel {
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
            x_weight: 1.0,
            y_weight: 1.0,
            coupling: DMatrix::from_element(1, 1, -2.0),
            y_linear: DVector::zeros(1),
        };
        let meta = InstanceMeta {
            seed: None,
            generator_version: 0,
            distribution: "hand".into(),
            random_rows: 0,
            box_radius: None,
        };
        QuadraticBilevel::new(upper, lower, Polyhedron::unconstrained(1, 1), meta).unwrap()
    }

    pub(crate) fn scalar_params() -> DsbloParams {
        DsbloParams {
            mode: ScheduleMode::Manual {
                beta: 0.9,
                gamma1: 1.0,
                gamma2: 10.0,
                k: 5,
                delta_y: 1e-8,
            },
            iterations: 500,
            seed: 3,
            x0: Some(vec![1.0]),
            ..Default::default()
        }
    }

    fn theory(eps: f64, delta_v: f64, lf_bar: f64) -> DsbloParams {
        DsbloParams {
            epsilon: eps,
            delta_bar: 1.0,
            mode: ScheduleMode::Theory {
                delta_v,
                lf_bar,
                lf_delta: None,
            },
            ..Default::default()
        }
    }

    #[test]
    fn theory_schedule_reference_case() {
        let s = schedule(&theory(1.0, 0.0, 5.0)).unwrap();
        assert_eq!(s.beta, 1.0 - 1.0 / 48_000.0);
        // ln(320) / -ln(1 - 1/48000), evaluated independently.
        let expected_k = (320f64.ln() / (1.0 / 48_000.0 + 0.5 / 48_000f64.powi(2) + 1.0 / 3.0 / 48_000f64.powi(3))).ceil();
        assert_eq!(s.k as f64, expected_k);
        assert_eq!(s.gamma1, expected_k);
        assert_eq!(s.gamma2, 4.0 * expected_k * 10.0);
        assert_eq!(s.delta_y, 1.0 / 12_800.0);
        assert!(s.beta >= 0.5 && s.beta < 1.0);
    }

    #[test]
    fn manual_schedule_passes_through() {
        let p = DsbloParams {
            mode: ScheduleMode::Manual {
                beta: 0.9,
                gamma1: 2.0,
                gamma2: 4.0,
                k: 10,
                delta_y: 1e-3,
            },
            ..Default::default()
        };
        let s = schedule(&p).unwrap();
        assert_eq!(
            s,
            ResolvedSchedule {
                beta: 0.9,
                k: 10,
                gamma1: 2.0,
                gamma2: 4.0,
                delta_y: 1e-3
            }
        );
    }

    #[test]
    fn infeasible_schedules_are_rejected() {
        assert!(schedule(&theory(11.0, 0.0, 5.0)).is_err());
        assert!(schedule(&theory(0.0, 0.0, 5.0)).is_err());
        for (beta, g1, g2, k) in [(1.0, 1.0, 1.0, 1), (0.5, 0.0, 1.0, 1), (0.5, 1.0, 1.0, 0)] {
            let p = DsbloParams {
                mode: ScheduleMode::Manual {
                    beta,
                    gamma1: g1,
                    gamma2: g2,
                    k,
                    delta_y: 1.0,
                },
                ..Default::default()
            };
            assert!(schedule(&p).is_err());
        }
    }

    #[test]
    fn step_size_examples() {
        let m = DVector::from_vec(vec![3.0, 0.0]);
        assert!((step_size(&m, 2.0, 4.0) - 0.1).abs() < 1e-16);
        assert_eq!(step_size(&DVector::zeros(3), 2.0, 4.0), 0.25);
    }

    #[test]
    fn scalar_dsblo_converges() {
        let inst = smooth_scalar();
        let log = run_dsblo(&inst, &scalar_params(), RunHooks::default()).unwrap();
        assert_eq!(log.records.len(), 500);
        assert!(log.last().unwrap().x[0].abs() <= 1e-2);
    }

    #[test]
    fn runs_are_deterministic() {
        let inst = smooth_scalar();
        let strip = |mut log: RunLog| {
            for r in &mut log.records {
                r.wall_time = 0.0;
            }
            log.timings = Timings::default();
            log
        };
        let a = strip(run_dsblo(&inst, &scalar_params(), RunHooks::default()).unwrap());
        let b = strip(run_dsblo(&inst, &scalar_params(), RunHooks::default()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn momentum_matches_closed_form() {
        let inst = crate::problem::generate_instance(4, 4, 3, 2).unwrap();
        let p = DsbloParams {
            iterations: 50,
            ..Default::default()
        };
        let log = run_dsblo(&inst, &p, RunHooks::default()).unwrap();
        let beta = 0.9f64;
        let g: Vec<DVector<f64>> = log.records.iter().map(|r| DVector::from_vec(r.grad.clone())).collect();
        for t in 1..=50usize {
            let mut closed = &g[0] * beta.powi(t as i32 - 1);
            for i in 2..=t {
                closed += &g[i - 1] * ((1.0 - beta) * beta.powi((t - i) as i32));
            }
            let m = DVector::from_vec(log.records[t - 1].m.clone());
            assert!((closed - m).amax() <= 1e-10);
        }
    }

    #[test]
    fn sampled_points_lie_on_segments() {
        let inst = crate::problem::generate_instance(5, 5, 3, 7).unwrap();
        let log = run_dsblo(&inst, &DsbloParams::default(), RunHooks::default()).unwrap();
        for w in log.records.windows(2) {
            let (prev, cur) = (&w[0], &w[1]);
            let lam = cur.segment.unwrap();
            assert!((0.0..1.0).contains(&lam));
            let a = DVector::from_vec(prev.x.clone());
            let b = DVector::from_vec(cur.x.clone());
            let xb = DVector::from_vec(cur.x_bar.clone());
            // on the segment: |a - x̄| + |x̄ - b| = |a - b|
            let lhs = (&a - &xb).norm() + (&xb - &b).norm();
            assert!((lhs - (&a - &b).norm()).abs() <= 1e-12 * (1.0 + (&a - &b).norm()));
            // step rule
            let m_prev = DVector::from_vec(prev.m.clone());
            assert!((&a - &m_prev * prev.eta - &b).amax() <= 1e-15);
            assert_eq!(prev.eta, 1.0 / (1.0 * prev.m_norm + 10.0));
        }
    }

    #[test]
    fn perturbation_stream_is_independent_of_option() {
        // Switching to sampled gradients draws from the component stream
        // only, so the q sequence is unchanged.
        let inst = crate::problem::generate(&crate::problem::GeneratorConfig {
            components: 8,
            ..crate::problem::GeneratorConfig::new(4, 4, 2, 3)
        })
        .unwrap();
        let det = run_dsblo(&inst, &DsbloParams::default(), RunHooks::default()).unwrap();
        let smp = run_dsblo(
            &inst,
            &DsbloParams {
                option: GradientOption::Sampled,
                ..Default::default()
            },
            RunHooks::default(),
        )
        .unwrap();
        let qa: Vec<f64> = det.records.iter().map(|r| r.q_norm).collect();
        let qb: Vec<f64> = smp.records.iter().map(|r| r.q_norm).collect();
        let sa: Vec<Option<f64>> = det.records.iter().map(|r| r.segment).collect();
        let sb: Vec<Option<f64>> = smp.records.iter().map(|r| r.segment).collect();
        assert_eq!(qa, qb);
        assert_eq!(sa, sb);
        assert!(smp.records.iter().all(|r| r.component.is_some()));
    }

    #[test]
    fn igd_baseline_scalar() {
        let inst = smooth_scalar();
        let p = IgdParams {
            step: 0.05,
            iterations: 500,
            x0: Some(vec![1.0]),
            ..Default::default()
        };
        let log = run_igd_baseline(&inst, &p, RunHooks::default()).unwrap();
        assert!(log.last().unwrap().x[0].abs() <= 1e-3);
        let frozen = run_igd_baseline(
            &inst,
            &IgdParams {
                step: 0.0,
                ..p
            },
            RunHooks::default(),
        )
        .unwrap();
        assert!(frozen.records.iter().all(|r| r.x == vec![1.0]));
    }

    #[test]
    fn cancellation_and_progress() {
        let inst = smooth_scalar();
        let cancel = AtomicBool::new(false);
        let mut seen = 0usize;
        let mut cb = |r: &IterateRecord| {
            seen += 1;
            if r.t == 10 {
                cancel.store(true, Ordering::Relaxed);
            }
        };
        let log = run_dsblo(
            &inst,
            &scalar_params(),
            RunHooks {
                progress: Some(&mut cb),
                cancel: Some(&cancel),
                eval_every: Some(3),
            },
        )
        .unwrap();
        assert_eq!(log.status, RunStatus::Cancelled);
        assert_eq!(log.records.len(), 10);
        assert_eq!(seen, 10);
        let evaluated: Vec<usize> = log.records.iter().filter(|r| r.f_exact.is_some()).map(|r| r.t).collect();
        assert_eq!(evaluated, vec![1, 3, 6, 9]);
        let x = log.records[0].x[0];
        assert!((log.records[0].f_exact.unwrap() - 2.0 * x * x).abs() < 1e-14);
    }

    #[test]
    fn run_parameter_errors() {
        let inst = smooth_scalar();
        let short = DsbloParams {
            iterations: 5,
            ..scalar_params()
        };
        assert!(matches!(run_dsblo(&inst, &short, RunHooks::default()), Err(RunError::InvalidParams(_))));
        let bad_x0 = DsbloParams {
            x0: Some(vec![1.0, 2.0]),
            ..scalar_params()
        };
        assert!(run_dsblo(&inst, &bad_x0, RunHooks::default()).is_err());
    }
}
