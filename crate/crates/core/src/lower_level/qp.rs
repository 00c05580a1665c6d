//! Dense strictly convex QP with inequality constraints,
//!
//! ```text
//! min 1/2 y^T H y + c^T y   s.t.   A y <= r
//! ```
//!
//! solved by a dual active-set method (Goldfarb-Idnani). The iterate always
//! solves the equality-constrained problem on its working set with
//! nonnegative multipliers; each pivot adds the most violated row, dropping
//! working rows whose multipliers would turn negative. The objective of the
//! iterate increases monotonically, so the method needs no feasible start.
//!
//! `H^{-1} A^T` and the Gram matrix `A H^{-1} A^T` depend only on `(H, A)`
//! and are computed once in [`DenseQp::new`], so repeated solves with
//! changing `(c, r)` only pay for the small working-set systems.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("Hessian is not symmetric positive definite")]
    NotSpd,
    #[error("constraints are infeasible (violation {violation:.3e} on row {row})")]
    Infeasible { row: usize, violation: f64 },
    #[error("pivot limit {pivots} reached")]
    MaxPivots { pivots: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// A row is added to the working set once its violation exceeds
    /// `add_tol * (1 + |r_i|)`.
    pub add_tol: f64,
    /// Relative threshold below which a new row counts as linearly dependent
    /// on the working set.
    pub dependence_tol: f64,
    /// Hard cap on pivots; `None` uses `50 (n + p) + 100`.
    pub max_pivots: Option<usize>,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            add_tol: 1e-11,
            dependence_tol: 1e-12,
            max_pivots: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub y: DVector<f64>,
    /// Multipliers for every row; zero off the working set.
    pub lambda: DVector<f64>,
    /// Final working set, sorted.
    pub working_set: Vec<usize>,
    pub pivots: usize,
    /// Objective value after every pivot.
    pub objective_trace: Vec<f64>,
    /// Whether the least-index anti-cycling rule was engaged.
    pub bland_engaged: bool,
}

/// Prepared `(H, A)` pair.
#[derive(Debug, Clone)]
pub struct DenseQp {
    h: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    a: DMatrix<f64>,
    hinv_at: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl DenseQp {
    pub fn new(h: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self, QpError> {
        let n = h.nrows();
        if h.ncols() != n || a.ncols() != n {
            return Err(QpError::Dimension(format!(
                "H is {}x{}, A is {}x{}",
                h.nrows(),
                h.ncols(),
                a.nrows(),
                a.ncols()
            )));
        }
        let chol = Cholesky::new(h.clone()).ok_or(QpError::NotSpd)?;
        let hinv_at = chol.solve(&a.transpose());
        let gram = &a * &hinv_at;
        Ok(DenseQp {
            h,
            chol,
            a,
            hinv_at,
            gram,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn objective(&self, c: &DVector<f64>, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.h * y)) + c.dot(y)
    }

    /// Equality-constrained solution on `working`: returns `(y, lambda_W)`
    /// or `None` when the working rows are dependent.
    pub fn solve_on(
        &self,
        c: &DVector<f64>,
        r: &DVector<f64>,
        working: &[usize],
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let y0 = -self.chol.solve(c);
        if working.is_empty() {
            return Some((y0, DVector::zeros(0)));
        }
        let m = working.len();
        let s = DMatrix::from_fn(m, m, |i, j| self.gram[(working[i], working[j])]);
        let s_chol = Cholesky::new(s)?;
        // A_W y0 - r_W
        let rhs = DVector::from_fn(m, |i, _| self.a.row(working[i]).dot(&y0.transpose()) - r[working[i]]);
        let lam = s_chol.solve(&rhs);
        let mut y = y0;
        for (i, &w) in working.iter().enumerate() {
            y.axpy(-lam[i], &self.hinv_at.column(w), 1.0);
        }
        Some((y, lam))
    }

    pub fn solve(&self, c: &DVector<f64>, r: &DVector<f64>, opts: &QpOptions) -> Result<QpSolution, QpError> {
        let (n, p) = (self.dim(), self.num_rows());
        if c.len() != n || r.len() != p {
            return Err(QpError::Dimension(format!(
                "c has length {}, r has length {}; expected {n} and {p}",
                c.len(),
                r.len()
            )));
        }
        let max_pivots = opts.max_pivots.unwrap_or(50 * (n + p) + 100);
        let stall_limit = 3 * p.max(1);

        let mut y = -self.chol.solve(c);
        let mut lambda = DVector::<f64>::zeros(p);
        let mut working: Vec<usize> = Vec::new();
        let mut in_working = vec![false; p];
        let mut pivots = 0usize;
        let mut stall = 0usize;
        let mut bland = false;
        let mut trace = vec![self.objective(c, &y)];

        let violation = |y: &DVector<f64>, i: usize| self.a.row(i).dot(&y.transpose()) - r[i];
        let threshold = |i: usize| opts.add_tol * (1.0 + r[i].abs());

        loop {
            // Pick the entering row.
            let mut enter: Option<(usize, f64)> = None;
            for i in 0..p {
                if in_working[i] {
                    continue;
                }
                let v = violation(&y, i);
                if v > threshold(i) {
                    if bland {
                        enter = Some((i, v));
                        break;
                    }
                    if enter.map_or(true, |(_, best)| v > best) {
                        enter = Some((i, v));
                    }
                }
            }
            let Some((enter, _)) = enter else {
                // Recompute the iterate exactly on the final working set and
                // drop any row whose multiplier came out meaningfully negative.
                let Some((y_exact, lam_w)) = self.solve_on(c, r, &working) else {
                    break;
                };
                let worst = (0..working.len())
                    .filter(|&i| lam_w[i] < -1e-10 * (1.0 + lam_w.amax()))
                    .min_by(|&i, &j| lam_w[i].total_cmp(&lam_w[j]));
                if let Some(i) = worst {
                    let row = working.remove(i);
                    in_working[row] = false;
                    lambda[row] = 0.0;
                    let (y2, lam2) = self.solve_on(c, r, &working).expect("subset of independent rows");
                    y = y2;
                    for (k, &w) in working.iter().enumerate() {
                        lambda[w] = lam2[k].max(0.0);
                    }
                    pivots += 1;
                    if pivots >= max_pivots {
                        return Err(QpError::MaxPivots { pivots });
                    }
                    continue;
                }
                y = y_exact;
                for (k, &w) in working.iter().enumerate() {
                    lambda[w] = lam_w[k].max(0.0);
                }
                // Exact recomputation can expose tiny new violations.
                if (0..p).any(|i| !in_working[i] && violation(&y, i) > threshold(i)) {
                    continue;
                }
                break;
            };

            let mut lambda_enter = 0.0;
            loop {
                pivots += 1;
                if pivots > max_pivots {
                    return Err(QpError::MaxPivots { pivots: max_pivots });
                }
                let m = working.len();
                let dlam = if m == 0 {
                    DVector::zeros(0)
                } else {
                    let s = DMatrix::from_fn(m, m, |i, j| self.gram[(working[i], working[j])]);
                    let g = DVector::from_fn(m, |i, _| self.gram[(working[i], enter)]);
                    match Cholesky::new(s) {
                        Some(ch) => -ch.solve(&g),
                        None => return Err(QpError::NotSpd),
                    }
                };
                let mut z = -self.hinv_at.column(enter).into_owned();
                for (i, &w) in working.iter().enumerate() {
                    z.axpy(-dlam[i], &self.hinv_at.column(w), 1.0);
                }
                let mut slope = self.gram[(enter, enter)];
                for (i, &w) in working.iter().enumerate() {
                    slope += self.gram[(enter, w)] * dlam[i];
                }
                // slope = -a_p^T z >= 0; zero means a_p lies in span(A_W).
                let dependent = slope <= opts.dependence_tol * self.gram[(enter, enter)].max(f64::MIN_POSITIVE);
                let full = if dependent {
                    f64::INFINITY
                } else {
                    violation(&y, enter).max(0.0) / slope
                };
                let mut partial = f64::INFINITY;
                let mut leave: Option<usize> = None;
                for (i, &w) in working.iter().enumerate() {
                    if dlam[i] < 0.0 {
                        let t = lambda[w] / -dlam[i];
                        let better = t < partial || (t == partial && bland && leave.is_some_and(|l| w < working[l]));
                        if better {
                            partial = t;
                            leave = Some(i);
                        }
                    }
                }
                if full.is_infinite() && partial.is_infinite() {
                    return Err(QpError::Infeasible {
                        row: enter,
                        violation: violation(&y, enter),
                    });
                }
                let t = full.min(partial);
                if !dependent {
                    y.axpy(t, &z, 1.0);
                }
                for (i, &w) in working.iter().enumerate() {
                    lambda[w] = (lambda[w] + t * dlam[i]).max(0.0);
                }
                lambda_enter += t;

                let obj = self.objective(c, &y);
                if obj > *trace.last().expect("nonempty") {
                    stall = 0;
                } else {
                    stall += 1;
                    if stall > stall_limit {
                        bland = true;
                    }
                }
                trace.push(obj);

                if full <= partial {
                    working.push(enter);
                    in_working[enter] = true;
                    lambda[enter] = lambda_enter;
                    break;
                }
                let i = leave.expect("finite partial step has a blocking row");
                let row = working.remove(i);
                in_working[row] = false;
                lambda[row] = 0.0;
            }
        }

        working.sort_unstable();
        Ok(QpSolution {
            y,
            lambda,
            working_set: working,
            pivots,
            objective_trace: trace,
            bland_engaged: bland,
        })
    }
}
