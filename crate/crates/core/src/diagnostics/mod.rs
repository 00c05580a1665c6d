//! Measurements on runs: exact `F(x)`, Monte-Carlo `F̄(x)`, windowed
//! Goldstein-stationarity estimates and finite-difference gradients.

pub mod oracle;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsblo::{LowerLevelSolver, RunLog};
use crate::implicit_grad::{implicit_gradient, GradError};
use crate::lower_level::{sample_perturbation, LowerLevelError, Perturbation, QuadraticLowerLevel};
use crate::problem::{ProblemOracle, QuadraticBilevel};
use crate::rng::Rng;

pub use oracle::{brute_force_ll, BruteForceSolution};

/// Safety factor on the sampled `max |∇_y f|`.
pub const LF_SAFETY: f64 = 1.5;
/// Share of the windows averaged by the trailing stationarity estimate.
pub const TRAILING_FRACTION: f64 = 0.1;
/// Draws of `q` per window point in the high-fidelity estimate.
pub const HIGH_FIDELITY_DRAWS: usize = 32;
const MAX_REDRAWS: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("window at t = {t} needs t > K = {k}")]
    WindowIncomplete { t: usize, k: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("run log has no schedule, windowed diagnostics need β and K")]
    MissingSchedule,
    #[error(transparent)]
    LowerLevel(#[from] LowerLevelError),
    #[error(transparent)]
    Gradient(#[from] GradError),
}

/// `F(x) = f(x, y*(x))` with the unperturbed lower level solved exactly.
pub fn eval_f_exact(inst: &QuadraticBilevel, x: &DVector<f64>) -> Result<f64, DiagnosticsError> {
    let ll = QuadraticLowerLevel::new(inst)?;
    let sol = ll.solve(x, &Perturbation::zero(inst.dim_y()))?;
    Ok(inst.eval_f(x, &sol.y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    /// Largest `|∇_y f(x, y*_q(x))|` over the draws.
    pub max_grad_y_f: f64,
}

/// Monte-Carlo estimate of `F̄(x) = E_q[F_q(x)]` over `n` fresh draws of `q`.
pub fn eval_fbar_mc(
    inst: &QuadraticBilevel,
    x: &DVector<f64>,
    radius: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<McEstimate, DiagnosticsError> {
    if n < 2 {
        return Err(DiagnosticsError::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let ll = QuadraticLowerLevel::new(inst)?;
    let mut values = Vec::with_capacity(n);
    let mut max_grad = 0.0f64;
    for _ in 0..n {
        let q = sample_perturbation(radius, inst.dim_y(), rng)?;
        let sol = ll.solve(x, &q)?;
        values.push(inst.eval_f(x, &sol.y));
        max_grad = max_grad.max(inst.grad_f(x, &sol.y).1.norm());
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(McEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        samples: n,
        max_grad_y_f: max_grad,
    })
}

/// `1.5 · max |∇_y f(x, y)|` over the given points.
pub fn estimate_lf<'p, O: ProblemOracle + ?Sized>(
    oracle: &O,
    points: impl IntoIterator<Item = (&'p DVector<f64>, &'p DVector<f64>)>,
) -> f64 {
    LF_SAFETY
        * points
            .into_iter()
            .map(|(x, y)| oracle.grad_f(x, y).1.norm())
            .fold(0.0, f64::max)
}

/// Outcome of comparing `|F̄(x) - F(x)|` with `L̂_f r / μ_g + 3 stderr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingCheck {
    pub f_exact: f64,
    pub estimate: McEstimate,
    pub lf_hat: f64,
    pub bound: f64,
    pub gap: f64,
    pub holds: bool,
}

/// Checks the smoothing-error bound at `x`. `L̂_f` is estimated from the
/// `∇_y f` values at `y*(x)` and at every sampled `y*_q(x)`.
pub fn smoothing_check(
    inst: &QuadraticBilevel,
    x: &DVector<f64>,
    radius: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<SmoothingCheck, DiagnosticsError> {
    let ll = QuadraticLowerLevel::new(inst)?;
    let sol = ll.solve(x, &Perturbation::zero(inst.dim_y()))?;
    let f_exact = inst.eval_f(x, &sol.y);
    let estimate = eval_fbar_mc(inst, x, radius, n, rng)?;
    let lf_hat = LF_SAFETY * inst.grad_f(x, &sol.y).1.norm().max(estimate.max_grad_y_f);
    let bound = lf_hat * radius / inst.mu_g() + 3.0 * estimate.stderr;
    let gap = (estimate.mean - f_exact).abs();
    Ok(SmoothingCheck {
        f_exact,
        estimate,
        lf_hat,
        bound,
        gap,
        holds: gap <= bound,
    })
}

/// Weights `α_i = β^{t-i}(1-β)/(1-β^K)` for `i = t-K+1, ..., t`, oldest first.
pub fn window_weights(beta: f64, k: u64) -> Vec<f64> {
    let denom = -(k as f64 * beta.ln()).exp_m1();
    (0..k)
        .map(|j| beta.powf((k - 1 - j) as f64) * (1.0 - beta) / denom)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityWindow {
    pub t: usize,
    pub k: u64,
    pub weights: Vec<f64>,
    pub combined: Vec<f64>,
    pub norm: f64,
}

fn combine(t: usize, k: u64, weights: Vec<f64>, grads: &[DVector<f64>]) -> StationarityWindow {
    let mut combined = DVector::zeros(grads[0].len());
    for (w, g) in weights.iter().zip(grads) {
        combined += g * *w;
    }
    StationarityWindow {
        t,
        k,
        norm: combined.norm(),
        combined: combined.iter().copied().collect(),
        weights,
    }
}

fn window_range(log: &RunLog, t: usize, k: u64) -> Result<std::ops::Range<usize>, DiagnosticsError> {
    if (t as u64) <= k {
        return Err(DiagnosticsError::WindowIncomplete { t, k });
    }
    if t > log.records.len() {
        return Err(DiagnosticsError::InvalidArgument(format!(
            "t = {t} beyond the {} logged iterates",
            log.records.len()
        )));
    }
    // records are 1-based in t
    Ok(t - k as usize..t)
}

/// `Σ α_i g_i` over the stored gradients of iterations `t-K+1..=t`.
pub fn stationarity_window(log: &RunLog, t: usize, beta: f64, k: u64) -> Result<StationarityWindow, DiagnosticsError> {
    let range = window_range(log, t, k)?;
    let grads: Vec<DVector<f64>> = log.records[range]
        .iter()
        .map(|r| DVector::from_column_slice(&r.grad))
        .collect();
    Ok(combine(t, k, window_weights(beta, k), &grads))
}

/// Same window with each `∇F̄(x̄_i)` re-estimated from `n` fresh draws of `q`.
#[allow(clippy::too_many_arguments)]
pub fn stationarity_window_mc(
    solver: &dyn LowerLevelSolver,
    log: &RunLog,
    t: usize,
    beta: f64,
    k: u64,
    radius: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<StationarityWindow, DiagnosticsError> {
    if n == 0 {
        return Err(DiagnosticsError::InvalidArgument("need at least one draw".into()));
    }
    let range = window_range(log, t, k)?;
    let oracle = solver.oracle();
    let mut grads = Vec::with_capacity(k as usize);
    for rec in &log.records[range] {
        let x = DVector::from_column_slice(&rec.x_bar);
        let mut acc = DVector::zeros(x.len());
        for _ in 0..n {
            acc += mc_gradient(solver, oracle, &x, radius, rng)?;
        }
        grads.push(acc / n as f64);
    }
    Ok(combine(t, k, window_weights(beta, k), &grads))
}

fn mc_gradient(
    solver: &dyn LowerLevelSolver,
    oracle: &dyn ProblemOracle,
    x: &DVector<f64>,
    radius: f64,
    rng: &mut Rng,
) -> Result<DVector<f64>, DiagnosticsError> {
    let mut last = None;
    for _ in 0..=MAX_REDRAWS {
        let q = sample_perturbation(radius, oracle.dim_y(), rng)?;
        match solver.solve(x, &q) {
            Ok(sol) => match implicit_gradient(oracle, x, &sol) {
                Ok(g) => return Ok(g.grad),
                Err(e @ (GradError::DegenerateActiveSet { .. } | GradError::NoStrictComplementarity { .. })) => {
                    last = Some(DiagnosticsError::Gradient(e))
                }
                Err(e) => return Err(e.into()),
            },
            Err(e @ LowerLevelError::DegenerateActiveSet { .. }) => last = Some(e.into()),
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Window norms for every `t`, `None` while `t <= K`.
pub fn window_norms(log: &RunLog, beta: f64, k: u64) -> Vec<Option<f64>> {
    (1..=log.records.len())
        .into_par_iter()
        .map(|t| stationarity_window(log, t, beta, k).ok().map(|w| w.norm))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub windows: usize,
    pub final_norm: f64,
    pub min_norm: f64,
    pub min_t: usize,
    /// Mean over the last [`TRAILING_FRACTION`] of the windows.
    pub trailing_average: f64,
    pub trailing_span: usize,
    /// Mean over all windows.
    pub average_all: f64,
}

pub fn summarize_windows(norms: &[Option<f64>]) -> Option<WindowSummary> {
    let present: Vec<(usize, f64)> = norms
        .iter()
        .enumerate()
        .filter_map(|(i, n)| n.map(|v| (i + 1, v)))
        .collect();
    let &(_, final_norm) = present.last()?;
    let &(min_t, min_norm) = present
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty");
    let span = ((present.len() as f64 * TRAILING_FRACTION).ceil() as usize).max(1);
    let tail = &present[present.len() - span..];
    Some(WindowSummary {
        windows: present.len(),
        final_norm,
        min_norm,
        min_t,
        trailing_average: tail.iter().map(|p| p.1).sum::<f64>() / span as f64,
        trailing_span: span,
        average_all: present.iter().map(|p| p.1).sum::<f64>() / present.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplacementCheck {
    pub windows: usize,
    pub violations: usize,
    pub max_displacement: f64,
    pub bound: f64,
}

/// Checks `|x_{t-K} - x̄_i| <= bound` for `i = t-K+1..=t` and every `t > K`.
pub fn check_displacement(log: &RunLog, k: u64, bound: f64) -> DisplacementCheck {
    let k = k as usize;
    let n = log.records.len();
    let per_window: Vec<(usize, f64)> = (k + 1..=n)
        .into_par_iter()
        .map(|t| {
            let anchor = DVector::from_column_slice(&log.records[t - k - 1].x);
            let mut worst = 0.0f64;
            let mut bad = 0;
            for rec in &log.records[t - k..t] {
                let d = (&anchor - DVector::from_column_slice(&rec.x_bar)).norm();
                worst = worst.max(d);
                if d > bound * (1.0 + 1e-12) {
                    bad += 1;
                }
            }
            (bad, worst)
        })
        .collect();
    DisplacementCheck {
        windows: per_window.len(),
        violations: per_window.iter().map(|p| p.0).sum(),
        max_displacement: per_window.iter().map(|p| p.1).fold(0.0, f64::max),
        bound,
    }
}

/// Central differences, one coordinate at a time.
pub fn fd_gradient_oracle(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, step: f64) -> DVector<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    DVector::from_fn(x.len(), |i, _| {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        (up - down) / (2.0 * step)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub beta: f64,
    pub k: u64,
    pub delta_bar: f64,
    pub weight_sum_error: f64,
    pub summary: Option<WindowSummary>,
    pub displacement: DisplacementCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighFidelity {
    pub t: usize,
    pub draws: usize,
    pub norm: f64,
}

/// Per-run report; serialized as TOML by [`DiagnosticsReport::to_text`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub algorithm: String,
    pub fingerprint: String,
    pub iterations: usize,
    pub resamples: usize,
    pub f_first: Option<f64>,
    pub f_final: Option<f64>,
    pub final_grad_norm: f64,
    pub total_time_s: f64,
    pub ll_solve_time_s: f64,
    pub window: Option<WindowReport>,
    pub high_fidelity: Option<HighFidelity>,
}

impl DiagnosticsReport {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report fields are TOML-representable")
    }
}

/// Stored-gradient diagnostics for a finished run.
pub fn analyze_run(log: &RunLog) -> DiagnosticsReport {
    let window = log.schedule.map(|s| {
        let weights = window_weights(s.beta, s.k);
        let norms = window_norms(log, s.beta, s.k);
        WindowReport {
            beta: s.beta,
            k: s.k,
            delta_bar: s.window_radius(),
            weight_sum_error: (weights.iter().sum::<f64>() - 1.0).abs(),
            summary: summarize_windows(&norms),
            displacement: check_displacement(log, s.k, s.window_radius()),
        }
    });
    DiagnosticsReport {
        algorithm: log.algorithm.clone(),
        fingerprint: log.fingerprint.clone(),
        iterations: log.records.len(),
        resamples: log.resamples,
        f_first: log.first_f(),
        f_final: log.final_f(),
        final_grad_norm: log.last().map_or(f64::NAN, |r| DVector::from_column_slice(&r.grad).norm()),
        total_time_s: log.timings.total_s,
        ll_solve_time_s: log.timings.ll_solve_s,
        window,
        high_fidelity: None,
    }
}

/// Adds the Monte-Carlo re-evaluation of the final window to `report`.
pub fn add_high_fidelity(
    report: &mut DiagnosticsReport,
    solver: &dyn LowerLevelSolver,
    log: &RunLog,
    radius: f64,
    rng: &mut Rng,
) -> Result<(), DiagnosticsError> {
    let s = log.schedule.ok_or(DiagnosticsError::MissingSchedule)?;
    let t = log.records.len();
    let w = stationarity_window_mc(solver, log, t, s.beta, s.k, radius, HIGH_FIDELITY_DRAWS, rng)?;
    report.high_fidelity = Some(HighFidelity {
        t,
        draws: HIGH_FIDELITY_DRAWS,
        norm: w.norm,
    });
    Ok(())
}
