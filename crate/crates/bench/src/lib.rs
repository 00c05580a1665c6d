//! Fixtures shared by the benchmarks.

use dsblo::lower_level::{solve_ll_quadratic, LLSolution};
use dsblo::{generate_instance, DVector, Perturbation, QuadraticBilevel};

/// Seed-1 instance and a point whose lower-level solution has active rows.
pub fn fixture(d: usize, k: usize) -> (QuadraticBilevel, DVector<f64>, Perturbation, LLSolution) {
    let inst = generate_instance(d, d, k, 1).expect("generator accepts these dims");
    let x = DVector::from_element(d, 0.5);
    let mut q = Perturbation::zero(d);
    q.q[0] = 1e-4;
    q.radius = 1e-3;
    let sol = solve_ll_quadratic(&inst, &x, &q).expect("feasible fixture");
    (inst, x, q, sol)
}
