//! Acceptance checks, runnable from the CLI (`dsblo verify`) and from the
//! `acceptance` test target.
//!
//! The fast level runs the oracle, finite-difference, schedule and
//! determinism checks; the full level adds the Monte-Carlo smoothing bound
//! and the convergence runs on the two experiment instances.

pub mod exact;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{brute_force_ll, check_displacement, fd_gradient_oracle, smoothing_check, window_weights};
use crate::dsblo::{
    run_dsblo_with, run_igd_with, schedule, DsbloParams, IgdParams, LowerLevelSolver, RunHooks, RunLog, ScheduleMode,
};
use crate::harness::{self, mask_wall_time, AlgorithmSpec, ExperimentConfig, InstanceSpec, OutputSpec, RunFile};
use crate::implicit_grad::{component_spread, implicit_gradient, tangency_residual};
use crate::lower_level::{
    inactive_slack, sample_perturbation, sc_margin, LLSolution, LowerLevelError, Perturbation, QuadraticLowerLevel,
};
use crate::problem::{
    generate, generate_instance, GeneratorConfig, InstanceMeta, LinearTerm, LowerQuadratic, Polyhedron, ProblemOracle,
    QuadraticBilevel, UpperQuadratic,
};
use crate::rng::{self, Rng, Stream};
use exact::{exact_theory_schedule, round_f64, round_significant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Fast,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub level: Level,
    /// Negate the implicit gradient fed to the finite-difference check.
    pub inject_sign_flip: bool,
}

impl VerifyOptions {
    pub fn new(level: Level) -> Self {
        VerifyOptions {
            level,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub status: Status,
    pub detail: String,
    pub elapsed_s: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        format!(
            "criterion {:>2} {tag} {}: {} ({:.1} s)",
            self.id, self.name, self.detail, self.elapsed_s
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub level: Level,
    pub results: Vec<CriterionResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.status != Status::Fail)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let _ = writeln!(out, "{}", r.line());
        }
        let _ = writeln!(out, "overall {}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

#[derive(Debug, Clone, Copy)]
struct AuditTotals {
    solves: usize,
    max_kkt: f64,
    max_violation: f64,
    min_active_lambda: f64,
}

/// Running maxima of the certificates of every audited lower-level solve.
#[derive(Debug)]
pub struct KktAudit {
    totals: Mutex<AuditTotals>,
}

impl Default for KktAudit {
    fn default() -> Self {
        KktAudit {
            totals: Mutex::new(AuditTotals {
                solves: 0,
                max_kkt: 0.0,
                max_violation: 0.0,
                min_active_lambda: f64::INFINITY,
            }),
        }
    }
}

impl KktAudit {
    pub fn record(&self, sol: &LLSolution) {
        let mut t = self.totals.lock().expect("audit lock");
        t.solves += 1;
        t.max_kkt = t.max_kkt.max(sol.kkt_residual);
        t.max_violation = t.max_violation.max(sol.max_violation);
        t.min_active_lambda = t.min_active_lambda.min(sc_margin(sol));
    }

    pub fn solves(&self) -> usize {
        self.totals.lock().expect("audit lock").solves
    }
}

/// Exact lower level whose solutions are recorded in a [`KktAudit`].
pub struct AuditedSolver<'a> {
    pub inner: QuadraticLowerLevel<'a>,
    pub audit: &'a KktAudit,
}

impl<'a> AuditedSolver<'a> {
    pub fn new(inst: &'a QuadraticBilevel, audit: &'a KktAudit) -> Result<Self, LowerLevelError> {
        Ok(AuditedSolver {
            inner: QuadraticLowerLevel::new(inst)?,
            audit,
        })
    }
}

impl LowerLevelSolver for AuditedSolver<'_> {
    fn oracle(&self) -> &dyn ProblemOracle {
        self.inner.instance()
    }

    fn solve(&self, x: &DVector<f64>, q: &Perturbation) -> Result<LLSolution, LowerLevelError> {
        let sol = self.inner.solve(x, q)?;
        self.audit.record(&sol);
        Ok(sol)
    }
}

/// Shared state of one verification pass.
#[derive(Default)]
pub struct Suite {
    pub audit: KktAudit,
    runs: Mutex<Vec<(String, RunLog)>>,
}

impl Suite {
    fn keep(&self, label: impl Into<String>, log: RunLog) {
        self.runs.lock().expect("run lock").push((label.into(), log));
    }
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn timed(id: u8, name: &str, f: impl FnOnce() -> Outcome) -> CriterionResult {
    let started = Instant::now();
    let o = f();
    CriterionResult {
        id,
        name: name.to_string(),
        status: if o.passed { Status::Pass } else { Status::Fail },
        detail: o.detail,
        elapsed_s: started.elapsed().as_secs_f64(),
    }
}

fn skipped(id: u8, name: &str) -> CriterionResult {
    CriterionResult {
        id,
        name: name.to_string(),
        status: Status::Skip,
        detail: "full level only".into(),
        elapsed_s: 0.0,
    }
}

fn uniform_point(rng: &mut Rng, dim: usize, half_width: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.random_range(-half_width..half_width))
}

pub const NAMES: [&str; 10] = [
    "lower-level brute-force equivalence",
    "KKT certification",
    "implicit-gradient finite-difference check",
    "strict complementarity under perturbation",
    "smoothing error bound",
    "theory schedule formulas",
    "window displacement invariant",
    "finite-sum unbiasedness",
    "quadratic experiment reproduction",
    "CSV determinism",
];

/// Runs the criteria for `opts.level` and returns one result per criterion,
/// ordered by id.
pub fn run_verify(opts: VerifyOptions) -> VerifyReport {
    let suite = Suite::default();
    let full = opts.level == Level::Full;
    let mut results = vec![
        timed(1, NAMES[0], || criterion_brute_force(&suite)),
        timed(3, NAMES[2], || criterion_fd(&suite, opts.inject_sign_flip)),
        timed(4, NAMES[3], || criterion_strict_complementarity(&suite)),
        if full {
            timed(5, NAMES[4], criterion_smoothing)
        } else {
            skipped(5, NAMES[4])
        },
        timed(6, NAMES[5], criterion_schedule),
        timed(8, NAMES[7], || criterion_unbiased(&suite)),
        if full {
            timed(9, NAMES[8], || criterion_reproduction(&suite))
        } else {
            skipped(9, NAMES[8])
        },
        timed(10, NAMES[9], || criterion_determinism(&suite)),
    ];
    results.push(timed(7, NAMES[6], || criterion_displacement(&suite)));
    results.push(timed(2, NAMES[1], || criterion_kkt(&suite)));
    results.sort_by_key(|r| r.id);
    VerifyReport {
        level: opts.level,
        results,
    }
}

/// Runs a single criterion with a fresh suite. Criteria 2 and 7 inspect the
/// solves and runs of the criteria they follow, so they first run the fast
/// criteria that feed them.
pub fn run_criterion(id: u8, opts: VerifyOptions) -> Option<CriterionResult> {
    let suite = Suite::default();
    let name = *NAMES.get(usize::from(id).checked_sub(1)?)?;
    Some(match id {
        1 => timed(1, name, || criterion_brute_force(&suite)),
        2 => {
            criterion_brute_force(&suite);
            criterion_fd(&suite, false);
            criterion_strict_complementarity(&suite);
            criterion_unbiased(&suite);
            timed(2, name, || criterion_kkt(&suite))
        }
        3 => timed(3, name, || criterion_fd(&suite, opts.inject_sign_flip)),
        4 => timed(4, name, || criterion_strict_complementarity(&suite)),
        5 => timed(5, name, criterion_smoothing),
        6 => timed(6, name, criterion_schedule),
        7 => {
            criterion_determinism(&suite);
            timed(7, name, || criterion_displacement(&suite))
        }
        8 => timed(8, name, || criterion_unbiased(&suite)),
        9 => timed(9, name, || criterion_reproduction(&suite)),
        10 => timed(10, name, || criterion_determinism(&suite)),
        _ => return None,
    })
}

/// 100 small instances, `d_u, d_l` in 2..=4 and `k` in 0..=6 random rows on
/// top of the box rows, five random `(x, q)` each.
fn criterion_brute_force(suite: &Suite) -> Outcome {
    let mut rng = rng::stream(1, Stream::Sampling);
    let (mut compared, mut infeasible, mut worst_dy) = (0usize, 0usize, 0.0f64);
    let mut mismatches = Vec::new();
    let started = Instant::now();
    for seed in 1..=100u64 {
        let d_u = 2 + (seed % 3) as usize;
        let d_l = 2 + ((seed / 3) % 3) as usize;
        let k = (seed % 7) as usize;
        let inst = match generate_instance(d_u, d_l, k, seed) {
            Ok(i) => i,
            Err(e) => return outcome(false, format!("instance {seed}: {e}")),
        };
        let ll = AuditedSolver::new(&inst, &suite.audit).expect("generated Hessian is SPD");
        for _ in 0..5 {
            let x = uniform_point(&mut rng, d_u, 2.0);
            let q = sample_perturbation(1e-3, d_l, &mut rng).expect("positive radius");
            let reference = brute_force_ll(&inst, &x, &q);
            match (ll.solve(&x, &q), reference) {
                (Ok(sol), Some(bf)) => {
                    compared += 1;
                    let dy = (&sol.y - &bf.y).norm();
                    worst_dy = worst_dy.max(dy);
                    if dy > 1e-8 || sol.active_set != bf.active_set {
                        mismatches.push(format!(
                            "seed {seed}: |dy| = {dy:.2e}, active {:?} vs {:?}",
                            sol.active_set, bf.active_set
                        ));
                    }
                }
                (Err(LowerLevelError::Infeasible { .. }), None) => infeasible += 1,
                (got, want) => mismatches.push(format!(
                    "seed {seed}: solver {:?}, reference feasible {}",
                    got.map(|s| s.y),
                    want.is_some()
                )),
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let passed = mismatches.is_empty() && compared > 0 && elapsed < 30.0;
    let mut detail = format!(
        "{compared} solves compared, {infeasible} infeasible on both sides, max |dy| {worst_dy:.1e}, {elapsed:.1} s"
    );
    if let Some(m) = mismatches.first() {
        let _ = write!(detail, "; {} mismatches, first {m}", mismatches.len());
    }
    outcome(passed, detail)
}

fn criterion_kkt(suite: &Suite) -> Outcome {
    let t = *suite.audit.totals.lock().expect("audit lock");
    let passed = t.solves > 0 && t.max_kkt <= 1e-10 && t.max_violation <= 1e-9 && t.min_active_lambda >= 0.0;
    outcome(
        passed,
        format!(
            "{} solves, max KKT residual {:.1e}, max violation {:.1e}, min active multiplier {:.1e}",
            t.solves, t.max_kkt, t.max_violation, t.min_active_lambda
        ),
    )
}

/// Points with a nonempty active set, multipliers at least `1e-3` and
/// inactive slacks at least `1e-3`.
fn margin_points(
    ll: &AuditedSolver<'_>,
    inst: &QuadraticBilevel,
    rng: &mut Rng,
    count: usize,
) -> Vec<(DVector<f64>, Perturbation, LLSolution)> {
    let mut out = Vec::new();
    for _ in 0..10_000 {
        if out.len() == count {
            break;
        }
        let x = uniform_point(rng, inst.dim_x(), 1.5);
        let q = sample_perturbation(1e-3, inst.dim_y(), rng).expect("positive radius");
        if let Ok(sol) = ll.solve(&x, &q) {
            if !sol.active_set.is_empty() && sc_margin(&sol) >= 1e-3 && inactive_slack(inst, &x, &sol) >= 1e-3 {
                out.push((x, q, sol));
            }
        }
    }
    out
}

fn criterion_fd(suite: &Suite, sign_flip: bool) -> Outcome {
    let mut rng = rng::stream(3, Stream::Sampling);
    let (mut points, mut worst_rel, mut worst_tan) = (0usize, 0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for seed in 1..=10u64 {
        let inst = generate_instance(10, 10, 5, seed).expect("generator accepts the experiment dims");
        let ll = AuditedSolver::new(&inst, &suite.audit).expect("generated Hessian is SPD");
        let found = margin_points(&ll, &inst, &mut rng, 10);
        if found.len() < 10 {
            failures.push(format!("instance {seed}: only {} margin points", found.len()));
        }
        for (x, q, sol) in found {
            points += 1;
            let g = match implicit_gradient(&inst, &x, &sol) {
                Ok(g) => g,
                Err(e) => {
                    failures.push(format!("instance {seed}: {e}"));
                    continue;
                }
            };
            let analytic = if sign_flip { -&g.grad } else { g.grad.clone() };
            let f_q = |z: &DVector<f64>| {
                let s = ll.solve(z, &q).expect("solvable near a margin point");
                inst.eval_f(z, &s.y)
            };
            let fd = fd_gradient_oracle(f_q, &x, 1e-5);
            let rel = (&analytic - &fd).norm() / fd.norm().max(1e-8);
            worst_rel = worst_rel.max(rel);
            let tan = tangency_residual(&inst, &sol, &g.jac_y);
            worst_tan = worst_tan.max(tan);
            if rel > 1e-4 || tan > 1e-8 {
                failures.push(format!("instance {seed}: relative error {rel:.2e}, tangency {tan:.2e}"));
            }
        }
    }
    let mut detail = format!("{points} points, max relative error {worst_rel:.1e}, max tangency residual {worst_tan:.1e}");
    if let Some(f) = failures.first() {
        let _ = write!(detail, "; {} failures, first {f}", failures.len());
    }
    outcome(failures.is_empty() && points == 100, detail)
}

/// `g = |y - x|^2` with rows `y_1 <= 0`, `y_2 <= 0`. At `x = (0, 1)` the
/// unperturbed solution `y = 0` has both rows active, the first with a zero
/// multiplier.
pub fn weakly_active_instance() -> QuadraticBilevel {
    let upper = UpperQuadratic::new(
        1.0,
        1.0,
        DMatrix::zeros(2, 2),
        vec![LinearTerm {
            x: DVector::zeros(2),
            y: DVector::zeros(2),
        }],
    )
    .expect("consistent dims");
    let lower = LowerQuadratic {
        x_weight: 1.0,
        y_weight: 1.0,
        coupling: DMatrix::identity(2, 2) * -2.0,
        y_linear: DVector::zeros(2),
    };
    let cons = Polyhedron::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), DVector::zeros(2)).expect("consistent dims");
    let meta = InstanceMeta {
        seed: None,
        generator_version: 0,
        distribution: "weakly-active".into(),
        random_rows: 2,
        box_radius: None,
    };
    QuadraticBilevel::new(upper, lower, cons, meta).expect("consistent dims")
}

fn criterion_strict_complementarity(suite: &Suite) -> Outcome {
    let inst = weakly_active_instance();
    let ll = AuditedSolver::new(&inst, &suite.audit).expect("identity Hessian");
    let x = DVector::from_vec(vec![0.0, 1.0]);
    let base = match ll.solve(&x, &Perturbation::zero(2)) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("unperturbed solve failed: {e}")),
    };
    let base_margin = sc_margin(&base);
    let mut rng = rng::stream(4, Stream::Perturbation);
    let (mut positive, mut min_margin) = (0usize, f64::INFINITY);
    for _ in 0..1000 {
        let q = sample_perturbation(1e-3, 2, &mut rng).expect("positive radius");
        if let Ok(sol) = ll.solve(&x, &q) {
            let m = sc_margin(&sol);
            min_margin = min_margin.min(m);
            if m > 0.0 {
                positive += 1;
            }
        }
    }
    outcome(
        base.active_set == vec![0, 1] && base_margin == 0.0 && positive == 1000,
        format!(
            "unperturbed margin {base_margin:.1e} on rows {:?}; {positive}/1000 perturbed solves with positive margin (min {min_margin:.1e})",
            base.active_set
        ),
    )
}

fn criterion_smoothing() -> Outcome {
    let mut rng = rng::stream(5, Stream::MonteCarlo);
    let mut point_rng = rng::stream(5, Stream::Sampling);
    let (mut checked, mut violations, mut worst_ratio) = (0usize, 0usize, 0.0f64);
    for (d, k, seed) in [(10, 5, 1), (10, 5, 2), (6, 4, 3), (4, 3, 4)] {
        let inst = generate_instance(d, d, k, seed).expect("generator accepts these dims");
        for _ in 0..5 {
            let x = uniform_point(&mut point_rng, d, 1.0);
            match smoothing_check(&inst, &x, 1e-3, 1000, &mut rng) {
                Ok(c) => {
                    checked += 1;
                    worst_ratio = worst_ratio.max(c.gap / c.bound);
                    if !c.holds {
                        violations += 1;
                    }
                }
                Err(_) => violations += 1,
            }
        }
    }
    outcome(
        violations == 0,
        format!("{checked} points, {violations} violations, largest gap/bound {worst_ratio:.2}"),
    )
}

fn criterion_schedule() -> Outcome {
    let mut rng = rng::stream(6, Stream::Sampling);
    let log_uniform = |rng: &mut Rng, lo: f64, hi: f64| (rng.random_range(lo.ln()..hi.ln())).exp();
    let mut mismatches = Vec::new();
    let mut ks = Vec::new();
    for i in 0..20 {
        let eps = log_uniform(&mut rng, 0.05, 1.0);
        let delta_v = if i % 4 == 0 { 0.0 } else { log_uniform(&mut rng, 0.01, 5.0) };
        let lf_bar = log_uniform(&mut rng, 0.5, 10.0);
        let delta_bar = log_uniform(&mut rng, 0.01, 1.0);
        let lf_delta = (i % 3 == 0).then(|| log_uniform(&mut rng, 1e-6, 1e-2));
        let params = DsbloParams {
            epsilon: eps,
            delta_bar,
            mode: ScheduleMode::Theory {
                delta_v,
                lf_bar,
                lf_delta,
            },
            ..Default::default()
        };
        let got = schedule(&params);
        let want = exact_theory_schedule(eps, delta_bar, delta_v, lf_bar, lf_delta);
        match (got, want) {
            (Ok(s), Some(e)) => {
                ks.push(s.k);
                let fields = [
                    ("beta", s.beta, &e.beta),
                    ("gamma1", s.gamma1, &e.gamma1),
                    ("gamma2", s.gamma2, &e.gamma2),
                    ("delta_y", s.delta_y, &e.delta_y),
                ];
                if s.k != e.k {
                    mismatches.push(format!("tuple {i}: K {} vs {}", s.k, e.k));
                }
                for (name, v, exact) in fields {
                    if round_f64(v, 12) != round_significant(exact, 12) {
                        mismatches.push(format!("tuple {i}: {name} {v:e}"));
                    }
                }
            }
            (Err(_), None) => {}
            (got, want) => mismatches.push(format!("tuple {i}: feasibility differs ({got:?} vs {})", want.is_some())),
        }
    }
    let detail = format!(
        "20 tuples, K from {} to {}, {} mismatches{}",
        ks.iter().min().unwrap_or(&0),
        ks.iter().max().unwrap_or(&0),
        mismatches.len(),
        mismatches.first().map(|m| format!(", first {m}")).unwrap_or_default()
    );
    outcome(mismatches.is_empty(), detail)
}

fn criterion_displacement(suite: &Suite) -> Outcome {
    // small runs of our own so the check has material at the fast level too
    for (d, k, seed, kk) in [(4, 3, 1, 5u64), (6, 4, 2, 10), (10, 5, 3, 20)] {
        let inst = generate_instance(d, d, k, seed).expect("generator accepts these dims");
        let ll = AuditedSolver::new(&inst, &suite.audit).expect("generated Hessian is SPD");
        let params = DsbloParams {
            mode: ScheduleMode::Manual {
                beta: 0.8,
                gamma1: 0.5,
                gamma2: 5.0,
                k: kk,
                delta_y: 1e-8,
            },
            iterations: 200,
            seed,
            ..Default::default()
        };
        match run_dsblo_with(&ll, &inst.fingerprint(), &params, RunHooks::default()) {
            Ok(log) => suite.keep(format!("displacement d={d} seed={seed}"), log),
            Err(e) => return outcome(false, format!("run failed: {e}")),
        }
    }
    let runs = suite.runs.lock().expect("run lock");
    let (mut windows, mut violations, mut worst_weight, mut worst_ratio) = (0usize, 0usize, 0.0f64, 0.0f64);
    for (_, log) in runs.iter().filter(|(_, l)| l.schedule.is_some()) {
        let s = log.schedule.expect("filtered");
        let check = check_displacement(log, s.k, s.window_radius());
        windows += check.windows;
        violations += check.violations;
        worst_ratio = worst_ratio.max(check.max_displacement / check.bound);
        worst_weight = worst_weight.max((window_weights(s.beta, s.k).iter().sum::<f64>() - 1.0).abs());
    }
    let n_runs = runs.iter().filter(|(_, l)| l.schedule.is_some()).count();
    outcome(
        violations == 0 && worst_weight <= 1e-12 && windows > 0,
        format!(
            "{n_runs} runs, {windows} windows, {violations} violations, max displacement/bound {worst_ratio:.3}, max |sum alpha - 1| {worst_weight:.1e}"
        ),
    )
}

fn criterion_unbiased(suite: &Suite) -> Outcome {
    let cfg = GeneratorConfig {
        components: 8,
        ..GeneratorConfig::new(8, 8, 5, 8)
    };
    let inst = generate(&cfg).expect("generator accepts these dims");
    let ll = AuditedSolver::new(&inst, &suite.audit).expect("generated Hessian is SPD");
    let mut rng = rng::stream(8, Stream::Sampling);
    let (mut points, mut worst, mut max_var) = (0usize, 0.0f64, 0.0f64);
    let mut attempts = 0;
    while points < 20 && attempts < 1000 {
        attempts += 1;
        let x = uniform_point(&mut rng, 8, 1.5);
        let q = sample_perturbation(1e-3, 8, &mut rng).expect("positive radius");
        let Ok(sol) = ll.solve(&x, &q) else { continue };
        let (Ok(full), Ok((mean, var))) = (implicit_gradient(&inst, &x, &sol), component_spread(&inst, &x, &sol)) else {
            continue;
        };
        points += 1;
        worst = worst.max((&mean - &full.grad).amax());
        max_var = max_var.max(var.amax());
    }
    outcome(
        points == 20 && worst <= 1e-12,
        format!("{points} points, N = 8, max |mean - full| {worst:.1e}, max component variance {max_var:.2e}"),
    )
}

/// Parameters used for the two experiment instances.
pub fn experiment_params(d: usize) -> (DsbloParams, IgdParams) {
    let (gamma1, gamma2) = if d <= 10 { (1.0, 100.0) } else { (0.1, 10.0) };
    let dsblo = DsbloParams {
        mode: ScheduleMode::Manual {
            beta: 0.9,
            gamma1,
            gamma2,
            k: 10,
            delta_y: 1e-8,
        },
        perturb_radius: 1e-3,
        iterations: 2000,
        seed: 1,
        ..Default::default()
    };
    let igd = IgdParams {
        step: 0.05,
        iterations: 2000,
        perturb_radius: 1e-3,
        seed: 1,
        ..Default::default()
    };
    (dsblo, igd)
}

fn criterion_reproduction(suite: &Suite) -> Outcome {
    let mut details = Vec::new();
    let mut passed = true;
    for (d, k, budget) in [(10usize, 5usize, 60.0), (50, 10, 300.0)] {
        let inst = generate_instance(d, d, k, 1).expect("generator accepts the experiment dims");
        let ll = AuditedSolver::new(&inst, &suite.audit).expect("generated Hessian is SPD");
        let (dp, ip) = experiment_params(d);
        let eval_every = if d <= 10 { 1 } else { 5 };
        let hooks = || RunHooks {
            eval_every: Some(eval_every),
            ..Default::default()
        };
        let started = Instant::now();
        let ds = run_dsblo_with(&ll, &inst.fingerprint(), &dp, hooks());
        let runtime = started.elapsed().as_secs_f64();
        let igd = run_igd_with(&ll, &inst.fingerprint(), &ip, hooks());
        let (ds, igd) = match (ds, igd) {
            (Ok(a), Ok(b)) => (a, b),
            (a, b) => {
                passed = false;
                details.push(format!(
                    "d={d}: run failed ({:?}, {:?})",
                    a.err().map(|e| e.to_string()),
                    b.err().map(|e| e.to_string())
                ));
                continue;
            }
        };
        let report = crate::diagnostics::analyze_run(&ds);
        let trailing = report
            .window
            .as_ref()
            .and_then(|w| w.summary)
            .map_or(f64::INFINITY, |s| s.trailing_average);
        let (f1, ft) = (ds.first_f().unwrap_or(f64::NAN), ds.final_f().unwrap_or(f64::NAN));
        let fi = igd.final_f().unwrap_or(f64::NAN);
        let rel_gap = (fi - ft).abs() / ft.abs();
        let ok = ft < f1 && trailing <= 0.1 && runtime < budget && rel_gap <= 0.05;
        passed &= ok;
        details.push(format!(
            "d={d}: F {f1:.4} -> {ft:.4}, trailing stationarity {trailing:.1e}, {runtime:.1} s, IGD F {fi:.4} (gap {:.2}%)",
            100.0 * rel_gap
        ));
        suite.keep(format!("experiment d={d}"), ds);
    }
    outcome(passed, details.join("; "))
}

/// Small experiment used by the determinism check and the CLI tests.
pub fn determinism_config(dir: &Path) -> ExperimentConfig {
    let (mut dp, mut ip) = experiment_params(10);
    dp.iterations = 100;
    ip.iterations = 100;
    ExperimentConfig {
        instance: InstanceSpec::Generate(GeneratorConfig::new(10, 10, 5, 1)),
        algorithms: vec![AlgorithmSpec::Dsblo(dp), AlgorithmSpec::Igd(ip)],
        seeds: vec![1, 2],
        output: OutputSpec {
            dir: dir.to_path_buf(),
            ..Default::default()
        },
        eval_every: None,
        budget_s: None,
        threads: Some(2),
        high_fidelity: false,
    }
}

fn criterion_determinism(suite: &Suite) -> Outcome {
    let dirs = match (tempfile::tempdir(), tempfile::tempdir()) {
        (Ok(a), Ok(b)) => [a, b],
        _ => return outcome(false, "cannot create scratch directories".into()),
    };
    let mut traces: Vec<Vec<(String, String)>> = Vec::new();
    for dir in &dirs {
        let cfg = determinism_config(dir.path());
        let summary = match harness::run_experiment(&cfg) {
            Ok(s) if s.failures() == 0 => s,
            Ok(s) => return outcome(false, format!("{} runs failed", s.failures())),
            Err(e) => return outcome(false, e.to_string()),
        };
        let mut files = Vec::new();
        for o in &summary.outcomes {
            let path = o.csv_path.as_ref().expect("csv output enabled");
            let text = std::fs::read_to_string(path).unwrap_or_default();
            files.push((path.file_name().unwrap_or_default().to_string_lossy().into_owned(), mask_wall_time(&text)));
            if let Ok(run) = std::fs::read_to_string(&o.json_path)
                .map_err(|e| e.to_string())
                .and_then(|t| serde_json::from_str::<RunFile>(&t).map_err(|e| e.to_string()))
            {
                suite.keep(format!("determinism {}", o.algorithm), run.log);
            }
        }
        files.sort();
        traces.push(files);
    }
    let identical = traces[0] == traces[1];
    let n = traces[0].len();
    outcome(
        identical && n == 4,
        format!("{n} CSVs per pass, {}", if identical { "byte-identical with wall time masked" } else { "traces differ" }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weakly_active_fixture() {
        let inst = weakly_active_instance();
        let sol = QuadraticLowerLevel::new(&inst)
            .unwrap()
            .solve(&DVector::from_vec(vec![0.0, 1.0]), &Perturbation::zero(2))
            .unwrap();
        assert_eq!(sol.active_set, vec![0, 1]);
        assert_eq!(sol.lambda[0], 0.0);
        assert!((sol.lambda[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn fast_criteria_pass_and_sign_flip_is_caught() {
        assert_eq!(run_criterion(6, VerifyOptions::new(Level::Fast)).unwrap().status, Status::Pass);
        assert_eq!(run_criterion(4, VerifyOptions::new(Level::Fast)).unwrap().status, Status::Pass);
        let tampered = VerifyOptions {
            level: Level::Fast,
            inject_sign_flip: true,
        };
        assert_eq!(run_criterion(3, tampered).unwrap().status, Status::Fail);
        assert!(run_criterion(11, tampered).is_none());
        assert!(run_criterion(0, tampered).is_none());
    }
}
