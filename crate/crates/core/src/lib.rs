//! Bilevel optimization with a strongly convex, linearly constrained lower
//! level, solved by doubly stochastic perturbation (DS-BLO).
//!
//! The lower level `min_y g(x, y) + q^T y  s.t.  A y + B x <= b` is solved
//! with an active-set QP; implicit gradients come in closed form from the
//! active constraints; the outer loop uses normalized momentum steps taken
//! from uniformly sampled points on each segment.

// Negated float comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod diagnostics;
pub mod dsblo;
pub mod harness;
pub mod implicit_grad;
pub mod linalg;
pub mod lower_level;
pub mod problem;
pub mod rng;
pub mod verify;

pub use nalgebra::{DMatrix, DVector};

pub use crate::diagnostics::{eval_f_exact, DiagnosticsReport};
pub use crate::dsblo::{
    run_dsblo, run_igd_baseline, schedule, DsbloParams, GradientOption, IgdParams, IterateRecord, LlMethod,
    ResolvedSchedule, RunError, RunHooks, RunLog, ScheduleMode,
};
pub use crate::harness::{run_experiment, ExperimentConfig, HarnessError};
pub use crate::implicit_grad::{implicit_gradient, GradError, ImplicitGradient};
pub use crate::lower_level::{solve_ll_quadratic, LLSolution, LowerLevelError, Perturbation};
pub use crate::problem::{generate, generate_instance, GeneratorConfig, ProblemError, ProblemOracle, QuadraticBilevel};
