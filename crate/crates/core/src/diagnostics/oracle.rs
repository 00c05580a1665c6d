//! Exhaustive active-set enumeration for small quadratic lower levels.
//!
//! Every row subset of size at most `d_l` is tried as the active set: the
//! equality-constrained KKT system is solved directly and the candidate is
//! kept when it is primal feasible with nonnegative multipliers. Larger
//! subsets have linearly dependent rows and cannot carry unique multipliers.
//! Independent of the active-set QP, so it serves as a reference in tests
//! and in `verify`.

use nalgebra::{DMatrix, DVector};


use crate::lower_level::Perturbation;
use crate::problem::{ProblemOracle, QuadraticBilevel};

/// Relative slack, `slack <= ORACLE_ACTIVE_TOL (1 + |r_i|)`, below which
/// the reference reports a row active.
pub const ORACLE_ACTIVE_TOL: f64 = 1e-12;
const FEAS: f64 = 1e-9;
const DUAL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceSolution {
    pub y: DVector<f64>,
    /// Multipliers on all rows.
    pub lambda: DVector<f64>,
    /// Rows within [`ORACLE_ACTIVE_TOL`] of their bound at `y`.
    pub active_set: Vec<usize>,
    pub subsets_checked: usize,
}

/// Objective, primal point, active rows and their multipliers.
type Candidate = (f64, DVector<f64>, Vec<usize>, Vec<f64>);

struct Search<'a> {
    g: &'a DMatrix<f64>,
    s: &'a DVector<f64>,
    u: &'a DVector<f64>,
    hinv_at: &'a DMatrix<f64>,
    a: &'a DMatrix<f64>,
    r: &'a DVector<f64>,
    max: usize,
    rows: Vec<usize>,
    /// Cholesky factor of `G[W, W]`, row by row.
    chol: Vec<Vec<f64>>,
    checked: usize,
    best: Option<Candidate>,
    h: &'a DMatrix<f64>,
    c: &'a DVector<f64>,
}

impl Search<'_> {
    fn visit(&mut self) {
        self.checked += 1;
        let p = self.rows.len();
        // G_WW λ = s_W by forward and back substitution
        let mut z = vec![0.0; p];
        for i in 0..p {
            let mut v = self.s[self.rows[i]];
            for k in 0..i {
                v -= self.chol[i][k] * z[k];
            }
            z[i] = v / self.chol[i][i];
        }
        let mut lam = vec![0.0; p];
        for i in (0..p).rev() {
            let mut v = z[i];
            for k in i + 1..p {
                v -= self.chol[k][i] * lam[k];
            }
            lam[i] = v / self.chol[i][i];
        }
        if lam.iter().any(|&l| l < -DUAL) {
            return;
        }
        let mut y = -self.u;
        for (j, &row) in self.rows.iter().enumerate() {
            y.axpy(-lam[j], &self.hinv_at.column(row), 1.0);
        }
        let slack = self.r - self.a * &y;
        if slack.iter().any(|&v| v < -FEAS) {
            return;
        }
        let val = 0.5 * y.dot(&(self.h * &y)) + self.c.dot(&y);
        if self.best.as_ref().map_or(true, |b| val < b.0) {
            self.best = Some((val, y, self.rows.clone(), lam));
        }
    }

    fn extend(&mut self, start: usize) {
        self.visit();
        if self.rows.len() == self.max {
            return;
        }
        for i in start..self.g.nrows() {
            let p = self.rows.len();
            let mut l = vec![0.0; p + 1];
            for j in 0..p {
                let mut v = self.g[(self.rows[j], i)];
                for k in 0..j {
                    v -= self.chol[j][k] * l[k];
                }
                l[j] = v / self.chol[j][j];
            }
            let d = self.g[(i, i)] - l[..p].iter().map(|v| v * v).sum::<f64>();
            // dependent rows: no subset containing these rows has unique multipliers
            if d <= DEPENDENCE * self.g[(i, i)] {
                continue;
            }
            l[p] = d.sqrt();
            self.rows.push(i);
            self.chol.push(l);
            self.extend(i + 1);
            self.rows.pop();
            self.chol.pop();
        }
    }
}

const DEPENDENCE: f64 = 1e-12;

/// Minimizer of `g(x, ·) + q^T y` over the coupled polyhedron, or `None`
/// when no subset yields a KKT point (the feasible set is empty).
pub fn brute_force_ll(inst: &QuadraticBilevel, x: &DVector<f64>, q: &Perturbation) -> Option<BruteForceSolution> {
    let n = inst.dim_y();
    let cons = &inst.constraints;
    let m = cons.num_rows();
    let h = inst.hess_yy_g(x, &DVector::zeros(n));
    let c = inst.grad_y_g(x, &DVector::zeros(n)) + &q.q;
    let r = cons.rhs_at(x);
    let hinv = h.clone().try_inverse()?;
    let u = &hinv * &c;
    let hinv_at = &hinv * cons.a.transpose();
    let g = &cons.a * &hinv_at;
    // y = -u - H^{-1} A_W^T λ and A_W y = r_W give G_WW λ = -(A u + r)_W
    let s = -(&cons.a * &u + &r);
    let mut search = Search {
        g: &g,
        s: &s,
        u: &u,
        hinv_at: &hinv_at,
        a: &cons.a,
        r: &r,
        max: n.min(m),
        rows: Vec::new(),
        chol: Vec::new(),
        checked: 0,
        best: None,
        h: &h,
        c: &c,
    };
    search.extend(0);
    let checked = search.checked;
    search.best.map(|(_, y, rows, lam)| {
        let mut lambda = DVector::zeros(m);
        for (j, &row) in rows.iter().enumerate() {
            lambda[row] = lam[j].max(0.0);
        }
        let slack = &r - &cons.a * &y;
        let active_set = (0..m).filter(|&i| slack[i] <= ORACLE_ACTIVE_TOL * (1.0 + r[i].abs())).collect();
        BruteForceSolution {
            y,
            lambda,
            active_set,
            subsets_checked: checked,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lower_level::{sample_perturbation, solve_ll_quadratic};
    use crate::problem::generate_instance;
    use crate::rng::{stream, Stream};
    use rand::Rng as _;

    #[test]
    fn box_only_instance() {
        // k = 0 leaves the 2 d_l box rows; opposite rows are never combined.
        let inst = generate_instance(2, 2, 0, 1).unwrap();
        let bf = brute_force_ll(&inst, &DVector::zeros(2), &Perturbation::zero(2)).unwrap();
        assert_eq!(bf.subsets_checked, 1 + 4 + 4);
    }

    #[test]
    fn agrees_with_active_set_solver() {
        let mut rng = stream(11, Stream::Sampling);
        for seed in 0..10 {
            let inst = generate_instance(3, 3, 4, seed).unwrap();
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let q = sample_perturbation(1e-3, 3, &mut rng).unwrap();
            let exact = solve_ll_quadratic(&inst, &x, &q).unwrap();
            let bf = brute_force_ll(&inst, &x, &q).unwrap();
            assert!((&exact.y - &bf.y).norm() <= 1e-8);
            assert_eq!(exact.active_set, bf.active_set);
        }
    }
}
