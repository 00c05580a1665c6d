//! Bilevel problem model.
//!
//! The upper level minimizes `F(x) = f(x, y*(x))` where `y*(x)` minimizes a
//! strongly convex `g(x, ·)` over the coupled polyhedron
//! `{y : A y + B x <= b}`. [`ProblemOracle`] is the abstract first/second
//! order interface the solvers consume; [`QuadraticBilevel`] is the concrete
//! quadratic family used by the experiments, with a seeded generator and a
//! JSON instance format.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::RowMajor;
use crate::rng::{self, Rng, Stream};

pub const GENERATOR_VERSION: u32 = 1;
pub const INSTANCE_FORMAT: &str = "dsblo-instance";

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("feasible set cannot be certified bounded: {0}")]
    Unbounded(String),
    #[error("malformed instance file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), ProblemError> {
    if got == expected {
        Ok(())
    } else {
        Err(ProblemError::Dimension {
            what,
            got,
            expected,
        })
    }
}

/// The coupled feasible set `{y : A y + B x <= b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyhedron {
    /// `k x d_l` coefficients on `y`.
    pub a: DMatrix<f64>,
    /// `k x d_u` coefficients on `x`.
    pub b: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl Polyhedron {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, rhs: DVector<f64>) -> Result<Self, ProblemError> {
        check_len("B rows", b.nrows(), a.nrows())?;
        check_len("b", rhs.len(), a.nrows())?;
        Ok(Polyhedron { a, b, rhs })
    }

    /// No rows at all.
    pub fn unconstrained(d_u: usize, d_l: usize) -> Self {
        Polyhedron {
            a: DMatrix::zeros(0, d_l),
            b: DMatrix::zeros(0, d_u),
            rhs: DVector::zeros(0),
        }
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim_y(&self) -> usize {
        self.a.ncols()
    }

    pub fn dim_x(&self) -> usize {
        self.b.ncols()
    }

    /// Right-hand side of `A y <= b - B x` at the given upper-level point.
    pub fn rhs_at(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.rhs - &self.b * x
    }

    /// `b - A y - B x`; nonnegative entries are satisfied rows.
    pub fn slacks(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.rhs_at(x) - &self.a * y
    }

    /// `max_i (A y + B x - b)_i`, or `-inf` without rows.
    pub fn max_violation(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.slacks(x, y)
            .iter()
            .map(|s| -s)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Upper- and lower-level first/second order oracle.
///
/// `jac_xy_g` is the `d_l x d_u` Jacobian of `∇_y g` with respect to `x`.
/// Callers are responsible for passing vectors of the right dimensions.
pub trait ProblemOracle: Sync {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    fn constraints(&self) -> &Polyhedron;
    fn num_components(&self) -> usize;

    fn eval_f(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64;
    /// Full-batch `(∇_x f, ∇_y f)`.
    fn grad_f(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
    /// Gradients of component `xi`; their mean over all components is `grad_f`.
    fn sampled_grad_f(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        xi: usize,
    ) -> (DVector<f64>, DVector<f64>);

    fn eval_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64;
    fn grad_y_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    fn hess_yy_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;
    fn jac_xy_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;

    /// Strong convexity modulus of `g(x, ·)`.
    fn mu_g(&self) -> f64;
    /// Lipschitz constant of `∇_y g(x, ·)`.
    fn lipschitz_g(&self) -> f64;
}

/// Linear part of one upper-level component.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTerm {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

/// `f_i(x, y) = wx |x|^2 + x^T P y + wy |y|^2 + c_i^T x + d_i^T y`,
/// `f = mean_i f_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperQuadratic {
    pub x_weight: f64,
    pub y_weight: f64,
    /// `P`, `d_u x d_l`.
    pub coupling: DMatrix<f64>,
    pub components: Vec<LinearTerm>,
    mean: LinearTerm,
}

impl UpperQuadratic {
    pub fn new(
        x_weight: f64,
        y_weight: f64,
        coupling: DMatrix<f64>,
        components: Vec<LinearTerm>,
    ) -> Result<Self, ProblemError> {
        if components.is_empty() {
            return Err(ProblemError::InvalidConfig(
                "upper level needs at least one component".into(),
            ));
        }
        for c in &components {
            check_len("component x term", c.x.len(), coupling.nrows())?;
            check_len("component y term", c.y.len(), coupling.ncols())?;
        }
        let n = components.len() as f64;
        let mut mean = LinearTerm {
            x: DVector::zeros(coupling.nrows()),
            y: DVector::zeros(coupling.ncols()),
        };
        for c in &components {
            mean.x += &c.x;
            mean.y += &c.y;
        }
        mean.x /= n;
        mean.y /= n;
        Ok(UpperQuadratic {
            x_weight,
            y_weight,
            coupling,
            components,
            mean,
        })
    }

    pub fn mean_linear(&self) -> &LinearTerm {
        &self.mean
    }

    fn value(&self, x: &DVector<f64>, y: &DVector<f64>, lin: &LinearTerm) -> f64 {
        self.x_weight * x.norm_squared()
            + x.dot(&(&self.coupling * y))
            + self.y_weight * y.norm_squared()
            + lin.x.dot(x)
            + lin.y.dot(y)
    }

    fn grads(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        lin: &LinearTerm,
    ) -> (DVector<f64>, DVector<f64>) {
        let gx = x * (2.0 * self.x_weight) + &self.coupling * y + &lin.x;
        let gy = self.coupling.tr_mul(x) + y * (2.0 * self.y_weight) + &lin.y;
        (gx, gy)
    }
}

/// `g(x, y) = wx |x|^2 + x^T Q y + wy |y|^2 + h^T y` with `wy > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerQuadratic {
    pub x_weight: f64,
    pub y_weight: f64,
    /// `Q`, `d_u x d_l`.
    pub coupling: DMatrix<f64>,
    pub y_linear: DVector<f64>,
}

/// Generator provenance recorded with every instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub seed: Option<u64>,
    pub generator_version: u32,
    pub distribution: String,
    /// Number of generated (non-box) constraint rows.
    pub random_rows: usize,
    pub box_radius: Option<f64>,
}

/// Quadratic bilevel instance with a finite-sum upper level.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBilevel {
    pub upper: UpperQuadratic,
    pub lower: LowerQuadratic,
    pub constraints: Polyhedron,
    pub meta: InstanceMeta,
}

impl QuadraticBilevel {
    pub fn new(
        upper: UpperQuadratic,
        lower: LowerQuadratic,
        constraints: Polyhedron,
        meta: InstanceMeta,
    ) -> Result<Self, ProblemError> {
        let (d_u, d_l) = (upper.coupling.nrows(), upper.coupling.ncols());
        check_len("lower coupling rows", lower.coupling.nrows(), d_u)?;
        check_len("lower coupling cols", lower.coupling.ncols(), d_l)?;
        check_len("lower linear term", lower.y_linear.len(), d_l)?;
        check_len("constraint A cols", constraints.dim_y(), d_l)?;
        check_len("constraint B cols", constraints.dim_x(), d_u)?;
        if !(lower.y_weight > 0.0) {
            return Err(ProblemError::InvalidConfig(
                "lower-level y weight must be positive for strong convexity".into(),
            ));
        }
        Ok(QuadraticBilevel {
            upper,
            lower,
            constraints,
            meta,
        })
    }

    pub fn check_point(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<(), ProblemError> {
        check_len("x", x.len(), self.dim_x())?;
        check_len("y", y.len(), self.dim_y())
    }

    /// SHA-256 of the canonical instance file, first 16 bytes in hex.
    pub fn fingerprint(&self) -> String {
        let doc = serde_json::to_vec(&InstanceFile::from(self)).expect("instance serializes");
        let digest = Sha256::digest(&doc);
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), ProblemError> {
        let text = serde_json::to_string_pretty(&InstanceFile::from(self))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProblemError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&InstanceFile::from(self)).expect("instance serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ProblemError> {
        let file: InstanceFile = serde_json::from_str(text)?;
        file.into_instance()
    }
}

impl ProblemOracle for QuadraticBilevel {
    fn dim_x(&self) -> usize {
        self.upper.coupling.nrows()
    }

    fn dim_y(&self) -> usize {
        self.upper.coupling.ncols()
    }

    fn constraints(&self) -> &Polyhedron {
        &self.constraints
    }

    fn num_components(&self) -> usize {
        self.upper.components.len()
    }

    fn eval_f(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.upper.value(x, y, &self.upper.mean)
    }

    fn grad_f(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        self.upper.grads(x, y, &self.upper.mean)
    }

    fn sampled_grad_f(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        xi: usize,
    ) -> (DVector<f64>, DVector<f64>) {
        self.upper.grads(x, y, &self.upper.components[xi])
    }

    fn eval_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let lo = &self.lower;
        lo.x_weight * x.norm_squared()
            + x.dot(&(&lo.coupling * y))
            + lo.y_weight * y.norm_squared()
            + lo.y_linear.dot(y)
    }

    fn grad_y_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let lo = &self.lower;
        lo.coupling.tr_mul(x) + y * (2.0 * lo.y_weight) + &lo.y_linear
    }

    fn hess_yy_g(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim_y(), self.dim_y()) * (2.0 * self.lower.y_weight)
    }

    fn jac_xy_g(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        self.lower.coupling.transpose()
    }

    fn mu_g(&self) -> f64 {
        2.0 * self.lower.y_weight
    }

    fn lipschitz_g(&self) -> f64 {
        2.0 * self.lower.y_weight
    }
}

/// Checked evaluation of the full-batch upper-level objective.
pub fn eval_f(inst: &QuadraticBilevel, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64, ProblemError> {
    inst.check_point(x, y)?;
    Ok(inst.eval_f(x, y))
}

/// Uniform component index in `[0, N)`.
pub fn sample_component<O: ProblemOracle + ?Sized>(oracle: &O, rng: &mut Rng) -> usize {
    let n = oracle.num_components();
    if n == 1 {
        0
    } else {
        rng.random_range(0..n)
    }
}

/// Parameters of the random instance family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub d_u: usize,
    pub d_l: usize,
    /// Random constraint rows (box rows come on top).
    pub k: usize,
    pub seed: u64,
    /// Upper-level finite-sum size.
    pub components: usize,
    /// Half-width of the appended box `-R <= y <= R`; `None` appends nothing.
    pub box_radius: Option<f64>,
    /// `b` is raised to at least this value so `y = 0` is strictly feasible at `x = 0`.
    pub rhs_floor: f64,
    /// Scale of `P = scale * Q1` in the upper level.
    pub upper_coupling_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_u: 10,
            d_l: 10,
            k: 5,
            seed: 1,
            components: 1,
            box_radius: Some(10.0),
            rhs_floor: 0.1,
            upper_coupling_scale: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn new(d_u: usize, d_l: usize, k: usize, seed: u64) -> Self {
        GeneratorConfig {
            d_u,
            d_l,
            k,
            seed,
            ..Default::default()
        }
    }
}

/// Random instance with the default generator settings.
pub fn generate_instance(d_u: usize, d_l: usize, k: usize, seed: u64) -> Result<QuadraticBilevel, ProblemError> {
    generate(&GeneratorConfig::new(d_u, d_l, k, seed))
}

/// Draws `f = |x|^2 + s x^T Q1 y + |y|^2 + 1^T x + 1^T y` and
/// `g = |x|^2 + x^T Q2 y + |y|^2` with `Q1, Q2, A, B, b` entrywise `U[0,1]`.
pub fn generate(cfg: &GeneratorConfig) -> Result<QuadraticBilevel, ProblemError> {
    if cfg.d_u == 0 || cfg.d_l == 0 {
        return Err(ProblemError::InvalidConfig("d_u and d_l must be at least 1".into()));
    }
    if cfg.components == 0 {
        return Err(ProblemError::InvalidConfig("components must be at least 1".into()));
    }
    if let Some(r) = cfg.box_radius {
        if !(r.is_finite() && r > 0.0) {
            return Err(ProblemError::InvalidConfig(format!("box radius must be positive, got {r}")));
        }
    }
    if !(cfg.rhs_floor > 0.0) {
        return Err(ProblemError::InvalidConfig("rhs floor must be positive".into()));
    }

    let (d_u, d_l, k) = (cfg.d_u, cfg.d_l, cfg.k);
    let mut rng = rng::stream(cfg.seed, Stream::Generator);
    let mut row_major = |r: usize, c: usize| uniform_matrix(&mut rng, r, c);
    let q1 = row_major(d_u, d_l);
    let q2 = row_major(d_u, d_l);
    let a_rand = row_major(k, d_l);
    let b_rand = row_major(k, d_u);
    let rhs_rand: Vec<f64> = row_major(1, k).iter().map(|v| v.max(cfg.rhs_floor)).collect();

    let components = if cfg.components == 1 {
        vec![LinearTerm {
            x: DVector::from_element(d_u, 1.0),
            y: DVector::from_element(d_l, 1.0),
        }]
    } else {
        let offsets: Vec<(DVector<f64>, DVector<f64>)> = (0..cfg.components)
            .map(|_| {
                let u = row_major(1, d_u).row(0).transpose() * 2.0 - DVector::from_element(d_u, 1.0);
                let v = row_major(1, d_l).row(0).transpose() * 2.0 - DVector::from_element(d_l, 1.0);
                (u, v)
            })
            .collect();
        let n = cfg.components as f64;
        let mean_u = offsets.iter().fold(DVector::zeros(d_u), |acc, (u, _)| acc + u) / n;
        let mean_v = offsets.iter().fold(DVector::zeros(d_l), |acc, (_, v)| acc + v) / n;
        offsets
            .into_iter()
            .map(|(u, v)| LinearTerm {
                x: (u - &mean_u).add_scalar(1.0),
                y: (v - &mean_v).add_scalar(1.0),
            })
            .collect()
    };

    let box_rows = if cfg.box_radius.is_some() { 2 * d_l } else { 0 };
    let rows = k + box_rows;
    let mut a = DMatrix::zeros(rows, d_l);
    let mut b = DMatrix::zeros(rows, d_u);
    let mut rhs = DVector::zeros(rows);
    a.rows_mut(0, k).copy_from(&a_rand);
    b.rows_mut(0, k).copy_from(&b_rand);
    for (i, v) in rhs_rand.iter().enumerate() {
        rhs[i] = *v;
    }
    if let Some(radius) = cfg.box_radius {
        for j in 0..d_l {
            a[(k + 2 * j, j)] = 1.0;
            a[(k + 2 * j + 1, j)] = -1.0;
            rhs[k + 2 * j] = radius;
            rhs[k + 2 * j + 1] = radius;
        }
    }
    let constraints = Polyhedron::new(a, b, rhs)?;
    certify_bounded(&constraints, cfg.seed)?;

    let upper = UpperQuadratic::new(1.0, 1.0, q1 * cfg.upper_coupling_scale, components)?;
    let lower = LowerQuadratic {
        x_weight: 1.0,
        y_weight: 1.0,
        coupling: q2,
        y_linear: DVector::zeros(d_l),
    };
    let meta = InstanceMeta {
        seed: Some(cfg.seed),
        generator_version: GENERATOR_VERSION,
        distribution: "uniform[0,1]".into(),
        random_rows: k,
        box_radius: cfg.box_radius,
    };
    QuadraticBilevel::new(upper, lower, constraints, meta)
}

/// `r x c` matrix of `U[0,1)` entries, drawn in row-major order.
fn uniform_matrix(rng: &mut Rng, r: usize, c: usize) -> DMatrix<f64> {
    let data: Vec<f64> = (0..r * c).map(|_| rng.random::<f64>()).collect();
    DMatrix::from_row_slice(r, c, &data)
}

/// Recession-direction heuristic: the set is unbounded if some nonzero `d`
/// has `A d <= 0`. Probes coordinate directions, the all-ones directions and
/// a handful of seeded random directions; any hit rejects the instance.
fn certify_bounded(p: &Polyhedron, seed: u64) -> Result<(), ProblemError> {
    let n = p.dim_y();
    let mut probes: Vec<DVector<f64>> = Vec::new();
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        probes.push(e.clone());
        probes.push(-e);
    }
    probes.push(DVector::from_element(n, 1.0));
    probes.push(DVector::from_element(n, -1.0));
    let mut rng = rng::stream(seed, Stream::Sampling);
    for _ in 0..4 * n {
        probes.push(DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)));
    }
    for d in &probes {
        let ad = &p.a * d;
        if ad.iter().all(|v| *v <= 0.0) {
            return Err(ProblemError::Unbounded(format!(
                "recession direction found along {:?}",
                d.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
            )));
        }
    }
    Ok(())
}

/// On-disk representation of a [`QuadraticBilevel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub format: String,
    pub d_u: usize,
    pub d_l: usize,
    pub rows: usize,
    pub meta: InstanceMeta,
    pub upper: UpperFile,
    pub lower: LowerFile,
    pub constraints: ConstraintFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpperFile {
    pub x_weight: f64,
    pub y_weight: f64,
    pub coupling: RowMajor,
    pub components: Vec<ComponentFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentFile {
    pub x_linear: Vec<f64>,
    pub y_linear: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerFile {
    pub x_weight: f64,
    pub y_weight: f64,
    pub coupling: RowMajor,
    pub y_linear: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintFile {
    pub a: RowMajor,
    pub b: RowMajor,
    pub rhs: Vec<f64>,
}

impl From<&QuadraticBilevel> for InstanceFile {
    fn from(inst: &QuadraticBilevel) -> Self {
        InstanceFile {
            format: INSTANCE_FORMAT.into(),
            d_u: inst.dim_x(),
            d_l: inst.dim_y(),
            rows: inst.constraints.num_rows(),
            meta: inst.meta.clone(),
            upper: UpperFile {
                x_weight: inst.upper.x_weight,
                y_weight: inst.upper.y_weight,
                coupling: RowMajor::from(&inst.upper.coupling),
                components: inst
                    .upper
                    .components
                    .iter()
                    .map(|c| ComponentFile {
                        x_linear: c.x.iter().copied().collect(),
                        y_linear: c.y.iter().copied().collect(),
                    })
                    .collect(),
            },
            lower: LowerFile {
                x_weight: inst.lower.x_weight,
                y_weight: inst.lower.y_weight,
                coupling: RowMajor::from(&inst.lower.coupling),
                y_linear: inst.lower.y_linear.iter().copied().collect(),
            },
            constraints: ConstraintFile {
                a: RowMajor::from(&inst.constraints.a),
                b: RowMajor::from(&inst.constraints.b),
                rhs: inst.constraints.rhs.iter().copied().collect(),
            },
        }
    }
}

impl InstanceFile {
    pub fn into_instance(self) -> Result<QuadraticBilevel, ProblemError> {
        if self.format != INSTANCE_FORMAT {
            return Err(ProblemError::Malformed(format!("unknown format tag {:?}", self.format)));
        }
        let matrix = |m: &RowMajor, what: &str| {
            m.to_matrix()
                .ok_or_else(|| ProblemError::Malformed(format!("{what}: payload does not match shape")))
        };
        let upper_coupling = matrix(&self.upper.coupling, "upper.coupling")?;
        let lower_coupling = matrix(&self.lower.coupling, "lower.coupling")?;
        check_len("upper.coupling rows", upper_coupling.nrows(), self.d_u)?;
        check_len("upper.coupling cols", upper_coupling.ncols(), self.d_l)?;
        let a = matrix(&self.constraints.a, "constraints.a")?;
        let b = matrix(&self.constraints.b, "constraints.b")?;
        check_len("constraints.a rows", a.nrows(), self.rows)?;
        let components = self
            .upper
            .components
            .into_iter()
            .map(|c| LinearTerm {
                x: DVector::from_vec(c.x_linear),
                y: DVector::from_vec(c.y_linear),
            })
            .collect();
        let upper = UpperQuadratic::new(self.upper.x_weight, self.upper.y_weight, upper_coupling, components)?;
        let lower = LowerQuadratic {
            x_weight: self.lower.x_weight,
            y_weight: self.lower.y_weight,
            coupling: lower_coupling,
            y_linear: DVector::from_vec(self.lower.y_linear),
        };
        let constraints = Polyhedron::new(a, b, DVector::from_vec(self.constraints.rhs))?;
        QuadraticBilevel::new(upper, lower, constraints, self.meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive_f(inst: &QuadraticBilevel, x: &[f64], y: &[f64]) -> f64 {
        // Term by term, straight from the definition.
        let (du, dl) = (x.len(), y.len());
        let mut total = 0.0;
        for c in &inst.upper.components {
            let mut v = 0.0;
            for i in 0..du {
                v += inst.upper.x_weight * x[i] * x[i];
                v += c.x[i] * x[i];
                for j in 0..dl {
                    v += x[i] * inst.upper.coupling[(i, j)] * y[j];
                }
            }
            for j in 0..dl {
                v += inst.upper.y_weight * y[j] * y[j] + c.y[j] * y[j];
            }
            total += v;
        }
        total / inst.upper.components.len() as f64
    }

    fn rand_vec(rng: &mut Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn experiment_dimensions() {
        let inst = generate_instance(10, 10, 5, 1).unwrap();
        assert_eq!(inst.meta.random_rows, 5);
        let a = inst.constraints.a.rows(0, 5);
        let b = inst.constraints.b.rows(0, 5);
        assert_eq!((a.nrows(), a.ncols()), (5, 10));
        assert_eq!((b.nrows(), b.ncols()), (5, 10));
        assert_eq!(inst.constraints.rhs.rows(0, 5).len(), 5);
        // box rows appended
        assert_eq!(inst.constraints.num_rows(), 5 + 20);
        for v in inst.constraints.a.rows(0, 5).iter().chain(inst.lower.coupling.iter()) {
            assert!((0.0..1.0).contains(v));
        }
    }

    #[test]
    fn scalar_instance_is_strongly_convex() {
        let inst = generate_instance(1, 1, 1, 0).unwrap();
        assert_eq!(inst.mu_g(), 2.0);
        let x = DVector::from_element(1, 0.7);
        let h = inst.hess_yy_g(&x, &DVector::zeros(1));
        assert_eq!(h[(0, 0)], 2.0);
        let q2 = inst.lower.coupling[(0, 0)];
        let y = DVector::from_element(1, -0.3);
        let expect = 0.49 + q2 * 0.7 * -0.3 + 0.09;
        assert!((inst.eval_g(&x, &y) - expect).abs() < 1e-15);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_instance(6, 4, 3, 42).unwrap();
        let b = generate_instance(6, 4, 3, 42).unwrap();
        let c = generate_instance(6, 4, 3, 43).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn origin_strictly_feasible_at_zero() {
        for seed in 0..20 {
            let inst = generate_instance(5, 5, 6, seed).unwrap();
            let slack = inst.constraints.slacks(&DVector::zeros(5), &DVector::zeros(5));
            assert!(slack.iter().all(|s| *s >= 0.1));
        }
    }

    #[test]
    fn generator_rejects_bad_configs() {
        assert!(generate_instance(0, 3, 1, 0).is_err());
        let unboxed = GeneratorConfig {
            box_radius: None,
            ..GeneratorConfig::new(3, 3, 2, 0)
        };
        assert!(matches!(generate(&unboxed), Err(ProblemError::Unbounded(_))));
        let bad_box = GeneratorConfig {
            box_radius: Some(-1.0),
            ..GeneratorConfig::new(3, 3, 2, 0)
        };
        assert!(generate(&bad_box).is_err());
    }

    #[test]
    fn zero_random_rows_keeps_box() {
        let inst = generate_instance(3, 2, 0, 5).unwrap();
        assert_eq!(inst.constraints.num_rows(), 4);
    }

    #[test]
    fn eval_f_trivial_points() {
        let inst = generate_instance(4, 3, 2, 9).unwrap();
        assert_eq!(eval_f(&inst, &DVector::zeros(4), &DVector::zeros(3)).unwrap(), 0.0);
        let mut e1 = DVector::zeros(4);
        e1[0] = 1.0;
        assert!((eval_f(&inst, &e1, &DVector::zeros(3)).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            eval_f(&inst, &DVector::zeros(3), &DVector::zeros(3)),
            Err(ProblemError::Dimension { .. })
        ));
    }

    #[test]
    fn eval_f_matches_naive() {
        let mut rng = Rng::seed_from_u64(3);
        for n in [1, 3] {
            let inst = generate(&GeneratorConfig {
                components: n,
                ..GeneratorConfig::new(10, 10, 5, 1)
            })
            .unwrap();
            for _ in 0..10 {
                let x = rand_vec(&mut rng, 10);
                let y = rand_vec(&mut rng, 10);
                let naive = naive_f(&inst, x.as_slice(), y.as_slice());
                assert!((inst.eval_f(&x, &y) - naive).abs() <= 1e-12 * naive.abs().max(1.0));
            }
        }
    }

    #[test]
    fn grad_f_matches_central_differences() {
        let inst = generate(&GeneratorConfig {
            components: 4,
            ..GeneratorConfig::new(5, 4, 3, 11)
        })
        .unwrap();
        let mut rng = Rng::seed_from_u64(4);
        let h = 1e-5;
        for _ in 0..20 {
            let x = rand_vec(&mut rng, 5);
            let y = rand_vec(&mut rng, 4);
            let (gx, gy) = inst.grad_f(&x, &y);
            let mut fd = Vec::new();
            for i in 0..5 {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                fd.push((inst.eval_f(&p, &y) - inst.eval_f(&m, &y)) / (2.0 * h));
            }
            for j in 0..4 {
                let mut p = y.clone();
                let mut m = y.clone();
                p[j] += h;
                m[j] -= h;
                fd.push((inst.eval_f(&x, &p) - inst.eval_f(&x, &m)) / (2.0 * h));
            }
            let fd = DVector::from_vec(fd);
            let an = DVector::from_iterator(9, gx.iter().chain(gy.iter()).copied());
            assert!((&fd - &an).norm() <= 1e-6 * an.norm().max(1.0));
        }
    }

    #[test]
    fn lower_derivatives_match_finite_differences() {
        let inst = generate_instance(5, 4, 3, 2).unwrap();
        let mut rng = Rng::seed_from_u64(8);
        let h = 1e-5;
        for _ in 0..10 {
            let x = rand_vec(&mut rng, 5);
            let y = rand_vec(&mut rng, 4);
            let hess = inst.hess_yy_g(&x, &y);
            let jac = inst.jac_xy_g(&x, &y);
            for j in 0..4 {
                let mut p = y.clone();
                let mut m = y.clone();
                p[j] += h;
                m[j] -= h;
                let col = (inst.grad_y_g(&x, &p) - inst.grad_y_g(&x, &m)) / (2.0 * h);
                assert!((col - hess.column(j)).norm() < 1e-6);
            }
            for i in 0..5 {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                let col = (inst.grad_y_g(&p, &y) - inst.grad_y_g(&m, &y)) / (2.0 * h);
                assert!((col - jac.column(i)).norm() < 1e-6);
            }
            assert_eq!(hess, DMatrix::identity(4, 4) * 2.0);
        }
    }

    #[test]
    fn component_mean_is_full_gradient() {
        let inst = generate(&GeneratorConfig {
            components: 8,
            ..GeneratorConfig::new(6, 5, 3, 1)
        })
        .unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let x = rand_vec(&mut rng, 6);
        let y = rand_vec(&mut rng, 5);
        let (gx, gy) = inst.grad_f(&x, &y);
        let mut sx = DVector::zeros(6);
        let mut sy = DVector::zeros(5);
        for xi in 0..8 {
            let (a, b) = inst.sampled_grad_f(&x, &y, xi);
            sx += a;
            sy += b;
        }
        assert!((sx / 8.0 - gx).amax() <= 1e-12);
        assert!((sy / 8.0 - gy).amax() <= 1e-12);
    }

    #[test]
    fn component_sampling_frequencies() {
        let inst = generate(&GeneratorConfig {
            components: 4,
            ..GeneratorConfig::new(2, 2, 1, 1)
        })
        .unwrap();
        let mut rng = rng::stream(5, Stream::Component);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_component(&inst, &mut rng)] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
        let single = generate_instance(2, 2, 1, 1).unwrap();
        assert!((0..100).all(|_| sample_component(&single, &mut rng) == 0));
    }

    #[test]
    fn file_round_trip() {
        let inst = generate(&GeneratorConfig {
            components: 3,
            ..GeneratorConfig::new(4, 3, 2, 77)
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.json");
        inst.save(&path).unwrap();
        let back = QuadraticBilevel::load(&path).unwrap();
        assert_eq!(back, inst);
        assert_eq!(back.fingerprint(), inst.fingerprint());
    }

    #[test]
    fn malformed_files_are_rejected() {
        let inst = generate_instance(2, 2, 1, 1).unwrap();
        let mut file = InstanceFile::from(&inst);
        file.constraints.a.data.pop();
        assert!(matches!(file.into_instance(), Err(ProblemError::Malformed(_))));
        let mut file = InstanceFile::from(&inst);
        file.format = "other".into();
        assert!(file.into_instance().is_err());
        assert!(QuadraticBilevel::from_json("{}").is_err());
    }
}
