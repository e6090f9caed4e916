//! Variational-inequality problems, constraint sets and the residuals used
//! to measure how far a point is from `SOL(F, C)`.
//!
//! A problem is the pair `(F, C)` where `F: Rⁿ → Rⁿ` is an operator and
//!
//! ```text
//!     C = { x | g(x) ≤ 0, h(x) = Hx − c_h = 0 }
//! ```
//!
//! The inequality map `g` is either affine (`g(x) = Gx − c_g`) or an
//! arbitrary smooth map supplied as closures.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default tolerance used to classify a constraint as active.
pub const DEFAULT_TOL_ACTIVE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid tolerance {0}; must be strictly positive")]
    InvalidTolerance(f64),
    #[error("sample pair {0} has identical points")]
    DegeneratePair(usize),
    #[error("no sample pairs supplied")]
    EmptySample,
    #[error("jacobian check failed at column {column}: error {error:.3e} exceeds {bound:.3e}")]
    JacobianMismatch {
        column: usize,
        error: f64,
        bound: f64,
    },
    #[error("projection failed: {0}")]
    Projection(String),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<(), ViError> {
    if expected == found {
        Ok(())
    } else {
        Err(ViError::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}

type VecMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatMap = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type HessMap = Arc<dyn Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;

/// The operator `F` of a variational inequality.
///
/// Cloning is cheap; the maps are shared behind `Arc`s.
#[derive(Clone)]
pub struct OperatorF {
    dim: usize,
    eval: VecMap,
    jacobian: Option<MatMap>,
    affine: Option<(DMatrix<f64>, DVector<f64>)>,
    monotonicity: f64,
    lipschitz: Option<f64>,
}

impl fmt::Debug for OperatorF {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorF")
            .field("dim", &self.dim)
            .field("affine", &self.affine.is_some())
            .field("monotonicity", &self.monotonicity)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl OperatorF {
    /// Wraps an arbitrary map. Declared constants default to `μ = 0` and an
    /// unknown Lipschitz constant.
    pub fn new<Fe>(dim: usize, eval: Fe) -> Self
    where
        Fe: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            eval: Arc::new(eval),
            jacobian: None,
            affine: None,
            monotonicity: 0.0,
            lipschitz: None,
        }
    }

    /// `F(x) = Qx + r`. The declared constants are computed from `Q`:
    /// `μ = λ_min((Q + Qᵀ)/2)` clipped at zero and `ℓ_F = ‖Q‖₂`.
    pub fn affine(q: DMatrix<f64>, r: DVector<f64>) -> Result<Self, ViError> {
        let n = r.len();
        check_dim("affine operator rows", n, q.nrows())?;
        check_dim("affine operator cols", n, q.ncols())?;
        let sym = (&q + q.transpose()) * 0.5;
        let mu = sym.symmetric_eigenvalues().min().max(0.0);
        let lf = q.singular_values().max();
        let (qe, re) = (q.clone(), r.clone());
        let qj = q.clone();
        Ok(Self {
            dim: n,
            eval: Arc::new(move |x| &qe * x + &re),
            jacobian: Some(Arc::new(move |_| qj.clone())),
            affine: Some((q, r)),
            monotonicity: mu,
            lipschitz: Some(lf),
        })
    }

    pub fn with_jacobian<J>(mut self, jacobian: J) -> Self
    where
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(jacobian));
        self
    }

    /// Overrides the declared monotonicity and Lipschitz constants.
    pub fn with_constants(mut self, monotonicity: f64, lipschitz: Option<f64>) -> Self {
        self.monotonicity = monotonicity;
        self.lipschitz = lipschitz;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.eval)(x)
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.jacobian.as_ref().map(|j| j(x))
    }

    pub fn has_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    /// `(Q, r)` when the operator was built with [`OperatorF::affine`].
    pub fn affine_data(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        self.affine.as_ref().map(|(q, r)| (q, r))
    }

    pub fn monotonicity(&self) -> f64 {
        self.monotonicity
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    /// Finite-difference check of the supplied Jacobian at `x`:
    /// `‖(F(x+h·eᵢ) − F(x))/h − J(x)eᵢ‖ ≤ tol·(1 + ‖J(x)eᵢ‖)` for every column.
    pub fn check_jacobian(&self, x: &DVector<f64>, step: f64, tol: f64) -> Result<(), ViError> {
        check_dim("jacobian check point", self.dim, x.len())?;
        let Some(jac) = self.jacobian(x) else {
            return Ok(());
        };
        let fx = self.eval(x);
        for i in 0..self.dim {
            let mut xp = x.clone();
            xp[i] += step;
            let fd = (self.eval(&xp) - &fx) / step;
            let col = jac.column(i);
            let error = (fd - col).norm();
            let bound = tol * (1.0 + col.norm());
            if error > bound {
                return Err(ViError::JacobianMismatch {
                    column: i,
                    error,
                    bound,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
enum Inequalities {
    Polyhedral {
        g: DMatrix<f64>,
        c: DVector<f64>,
    },
    Smooth {
        m: usize,
        eval: VecMap,
        jacobian: MatMap,
        hessians: Option<HessMap>,
    },
}

/// Coordinate bounds `lo ≤ x ≤ hi` recognised in a polyhedral set whose
/// rows each touch a single coordinate and which has no equalities.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// For each inequality row: the coordinate, whether it is an upper bound,
    /// and the row coefficient.
    rows: Vec<(usize, bool, f64)>,
}

impl Bounds {
    pub fn clamp(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            y.len(),
            y.iter()
                .enumerate()
                .map(|(i, &yi)| yi.max(self.lower[i]).min(self.upper[i])),
        )
    }

    /// Row metadata: `(coordinate, is_upper, coefficient)`.
    pub fn rows(&self) -> &[(usize, bool, f64)] {
        &self.rows
    }
}

/// The constraint set `C = { g(x) ≤ 0, Hx − c_h = 0 }`.
#[derive(Clone)]
pub struct ConstraintSet {
    n: usize,
    ineq: Inequalities,
    h: DMatrix<f64>,
    c_h: DVector<f64>,
    bounds: Option<Bounds>,
}

impl fmt::Debug for ConstraintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstraintSet")
            .field("n", &self.n)
            .field("m", &self.m())
            .field("k", &self.k())
            .field("polyhedral", &self.is_polyhedral())
            .field("bounds", &self.bounds.is_some())
            .finish()
    }
}

impl ConstraintSet {
    /// `Gx ≤ c_g`, `Hx = c_h`. Pass empty (`0 × n`) matrices for absent blocks.
    pub fn polyhedral(
        g: DMatrix<f64>,
        c_g: DVector<f64>,
        h: DMatrix<f64>,
        c_h: DVector<f64>,
    ) -> Result<Self, ViError> {
        let n = g.ncols().max(h.ncols());
        check_dim("G columns", n, g.ncols())?;
        check_dim("H columns", n, h.ncols())?;
        check_dim("c_g length", g.nrows(), c_g.len())?;
        check_dim("c_h length", h.nrows(), c_h.len())?;
        let bounds = detect_bounds(&g, &c_g, h.nrows());
        Ok(Self {
            n,
            ineq: Inequalities::Polyhedral { g, c: c_g },
            h,
            c_h,
            bounds,
        })
    }

    /// Only inequalities, `Gx ≤ c_g`.
    pub fn inequalities(g: DMatrix<f64>, c_g: DVector<f64>) -> Result<Self, ViError> {
        let n = g.ncols();
        Self::polyhedral(g, c_g, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    /// The box `lo ≤ x ≤ hi`, encoded as `[I; −I] x ≤ [hi; −lo]`.
    pub fn boxed(lower: &[f64], upper: &[f64]) -> Result<Self, ViError> {
        check_dim("box bounds", lower.len(), upper.len())?;
        let n = lower.len();
        let mut g = DMatrix::zeros(2 * n, n);
        let mut c = DVector::zeros(2 * n);
        for i in 0..n {
            g[(i, i)] = 1.0;
            c[i] = upper[i];
            g[(n + i, i)] = -1.0;
            c[n + i] = -lower[i];
        }
        Self::inequalities(g, c)
    }

    /// The nonnegative orthant `x ≥ 0`, encoded as `−I x ≤ 0`.
    pub fn orthant(n: usize) -> Self {
        Self::inequalities(-DMatrix::identity(n, n), DVector::zeros(n))
            .expect("orthant dimensions are consistent")
    }

    /// `Rⁿ` with no constraints.
    pub fn unconstrained(n: usize) -> Self {
        Self::inequalities(DMatrix::zeros(0, n), DVector::zeros(0))
            .expect("empty constraint blocks are consistent")
    }

    /// Smooth inequalities `g(x) ≤ 0` of dimension `m` plus affine equalities.
    pub fn smooth<Ge, Gj>(
        n: usize,
        m: usize,
        g: Ge,
        g_jacobian: Gj,
        h: DMatrix<f64>,
        c_h: DVector<f64>,
    ) -> Result<Self, ViError>
    where
        Ge: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        Gj: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        check_dim("H columns", n, h.ncols())?;
        check_dim("c_h length", h.nrows(), c_h.len())?;
        Ok(Self {
            n,
            ineq: Inequalities::Smooth {
                m,
                eval: Arc::new(g),
                jacobian: Arc::new(g_jacobian),
                hessians: None,
            },
            h,
            c_h,
            bounds: None,
        })
    }

    /// Attaches Hessians `∇²gᵢ(x)` to a smooth set. No effect on polyhedral sets.
    pub fn with_hessians<Gh>(mut self, hessians: Gh) -> Self
    where
        Gh: Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    {
        if let Inequalities::Smooth { hessians: slot, .. } = &mut self.ineq {
            *slot = Some(Arc::new(hessians));
        }
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        match &self.ineq {
            Inequalities::Polyhedral { g, .. } => g.nrows(),
            Inequalities::Smooth { m, .. } => *m,
        }
    }

    pub fn k(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_polyhedral(&self) -> bool {
        matches!(self.ineq, Inequalities::Polyhedral { .. })
    }

    /// `(G, c_g)` when the inequalities are affine.
    pub fn polyhedral_data(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        match &self.ineq {
            Inequalities::Polyhedral { g, c } => Some((g, c)),
            Inequalities::Smooth { .. } => None,
        }
    }

    pub fn bounds(&self) -> Option<&Bounds> {
        self.bounds.as_ref()
    }

    pub fn h_matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn c_h(&self) -> &DVector<f64> {
        &self.c_h
    }

    pub fn g(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.ineq {
            Inequalities::Polyhedral { g, c } => g * x - c,
            Inequalities::Smooth { eval, .. } => eval(x),
        }
    }

    pub fn g_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.ineq {
            Inequalities::Polyhedral { g, .. } => g.clone(),
            Inequalities::Smooth { jacobian, .. } => jacobian(x),
        }
    }

    /// `∇²gᵢ(x)` for each row; zero matrices for polyhedral sets, `None`
    /// when a smooth set was built without Hessians.
    pub fn g_hessians(&self, x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        match &self.ineq {
            Inequalities::Polyhedral { g, .. } => {
                Some(vec![DMatrix::zeros(self.n, self.n); g.nrows()])
            }
            Inequalities::Smooth { hessians, .. } => hessians.as_ref().map(|h| h(x)),
        }
    }

    pub fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x - &self.c_h
    }

    /// `max(0, maxᵢ gᵢ(x), ‖h(x)‖_∞)`.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let g = self.g(x).iter().fold(0.0_f64, |a, &b| a.max(b));
        let h = self.h(x).amax();
        g.max(h)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.n && self.violation(x) <= tol
    }

    /// Gram matrix `[∂g; ∂h][∂g; ∂h]ᵀ` at `x` (the block matrix `Q̃` for
    /// polyhedral sets).
    pub fn constraint_gram(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let a = self.stacked_jacobian(x);
        &a * a.transpose()
    }

    /// `[∂g/∂x; H]`, shape `(m + k) × n`.
    pub fn stacked_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let jg = self.g_jacobian(x);
        let (m, k) = (self.m(), self.k());
        let mut a = DMatrix::zeros(m + k, self.n);
        a.rows_mut(0, m).copy_from(&jg);
        a.rows_mut(m, k).copy_from(&self.h);
        a
    }

    /// Finite-difference check of a smooth set's Jacobian, same criterion
    /// as [`OperatorF::check_jacobian`].
    pub fn check_g_jacobian(&self, x: &DVector<f64>, step: f64, tol: f64) -> Result<(), ViError> {
        check_dim("constraint point", self.n, x.len())?;
        let jac = self.g_jacobian(x);
        let gx = self.g(x);
        for i in 0..self.n {
            let mut xp = x.clone();
            xp[i] += step;
            let fd = (self.g(&xp) - &gx) / step;
            let col = jac.column(i);
            let error = (fd - col).norm();
            let bound = tol * (1.0 + col.norm());
            if error > bound {
                return Err(ViError::JacobianMismatch {
                    column: i,
                    error,
                    bound,
                });
            }
        }
        Ok(())
    }
}

fn detect_bounds(g: &DMatrix<f64>, c: &DVector<f64>, k: usize) -> Option<Bounds> {
    if k != 0 {
        return None;
    }
    let n = g.ncols();
    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    let mut rows = Vec::with_capacity(g.nrows());
    for (i, row) in g.row_iter().enumerate() {
        let mut nz = row.iter().enumerate().filter(|(_, &v)| v != 0.0);
        let (j, &a) = nz.next()?;
        if nz.next().is_some() {
            return None;
        }
        let bound = c[i] / a;
        if a > 0.0 {
            upper[j] = upper[j].min(bound);
            rows.push((j, true, a));
        } else {
            lower[j] = lower[j].max(bound);
            rows.push((j, false, a));
        }
    }
    if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
        return None;
    }
    Some(Bounds { lower, upper, rows })
}

/// A VI instance: operator plus constraint set.
#[derive(Debug, Clone)]
pub struct ViProblem {
    pub name: String,
    pub operator: OperatorF,
    pub constraints: ConstraintSet,
    /// Known solution, when one is available in closed form.
    pub solution: Option<DVector<f64>>,
}

impl ViProblem {
    pub fn new(name: impl Into<String>, operator: OperatorF, constraints: ConstraintSet) -> Result<Self, ViError> {
        check_dim("operator vs constraint dimension", constraints.n(), operator.dim())?;
        Ok(Self {
            name: name.into(),
            operator,
            constraints,
            solution: None,
        })
    }

    pub fn with_solution(mut self, x: DVector<f64>) -> Self {
        self.solution = Some(x);
        self
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }
}

/// Classification of the inequality constraints at a point (0-based indices).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActiveSets {
    /// `|gᵢ(x)| ≤ tol`.
    pub active: Vec<usize>,
    /// `gᵢ(x) < −tol`.
    pub inactive: Vec<usize>,
    /// `gᵢ(x) > tol`.
    pub violated: Vec<usize>,
    /// `|hⱼ(x)| > tol`.
    pub equality_violated: Vec<usize>,
}

pub fn active_sets(c: &ConstraintSet, x: &DVector<f64>, tol_active: f64) -> Result<ActiveSets, ViError> {
    if !(tol_active > 0.0) {
        return Err(ViError::InvalidTolerance(tol_active));
    }
    check_dim("active set point", c.n(), x.len())?;
    let mut sets = ActiveSets::default();
    for (i, &gi) in c.g(x).iter().enumerate() {
        if gi.abs() <= tol_active {
            sets.active.push(i);
        } else if gi < 0.0 {
            sets.inactive.push(i);
        } else {
            sets.violated.push(i);
        }
    }
    sets.equality_violated = c
        .h(x)
        .iter()
        .enumerate()
        .filter(|(_, hj)| hj.abs() > tol_active)
        .map(|(j, _)| j)
        .collect();
    Ok(sets)
}

/// A candidate `(x, u, v)` for the KKT system of `VI(F, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktTriple {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
}

impl KktTriple {
    pub fn new(x: DVector<f64>, u: DVector<f64>, v: DVector<f64>) -> Self {
        Self { x, u, v }
    }

    /// `(x, 0, 0)` sized for `c`.
    pub fn primal(x: DVector<f64>, c: &ConstraintSet) -> Self {
        Self {
            x,
            u: DVector::zeros(c.m()),
            v: DVector::zeros(c.k()),
        }
    }
}

/// Largest violation among stationarity, primal feasibility, dual
/// feasibility and complementary slackness. Zero exactly at KKT triples.
pub fn kkt_residual(f: &OperatorF, c: &ConstraintSet, t: &KktTriple) -> Result<f64, ViError> {
    check_dim("KKT x", c.n(), t.x.len())?;
    check_dim("KKT x vs operator", f.dim(), t.x.len())?;
    check_dim("KKT u", c.m(), t.u.len())?;
    check_dim("KKT v", c.k(), t.v.len())?;
    let g = c.g(&t.x);
    let stationarity =
        (f.eval(&t.x) + c.g_jacobian(&t.x).tr_mul(&t.u) + c.h_matrix().tr_mul(&t.v)).amax();
    let primal = g.iter().fold(0.0_f64, |a, &b| a.max(b));
    let equality = c.h(&t.x).amax();
    let dual = t.u.iter().fold(0.0_f64, |a, &b| a.max(-b));
    let slackness = t.u.dot(&g).abs();
    Ok(stationarity.max(primal).max(equality).max(dual).max(slackness))
}

/// `‖x − Proj_C(x − F(x))‖`, zero exactly on `SOL(F, C)`.
pub fn natural_residual<P>(f: &OperatorF, x: &DVector<f64>, project: P) -> Result<f64, ViError>
where
    P: FnOnce(&DVector<f64>) -> Result<DVector<f64>, ViError>,
{
    check_dim("natural residual point", f.dim(), x.len())?;
    let y = x - f.eval(x);
    let p = project(&y)?;
    check_dim("projected point", x.len(), p.len())?;
    Ok((x - p).norm())
}

/// `min (x − y)ᵀ(F(x) − F(y)) / ‖x − y‖²` over the sample pairs: an
/// empirical lower bound on the monotonicity constant.
pub fn probe_monotonicity(
    f: &OperatorF,
    pairs: &[(DVector<f64>, DVector<f64>)],
) -> Result<f64, ViError> {
    if pairs.is_empty() {
        return Err(ViError::EmptySample);
    }
    let mut best = f64::INFINITY;
    for (i, (x, y)) in pairs.iter().enumerate() {
        check_dim("monotonicity sample", f.dim(), x.len())?;
        check_dim("monotonicity sample", f.dim(), y.len())?;
        let d = x - y;
        let dd = d.norm_squared();
        if dd == 0.0 {
            return Err(ViError::DegeneratePair(i));
        }
        let ratio = d.dot(&(f.eval(x) - f.eval(y))) / dd;
        best = best.min(ratio);
    }
    Ok(best)
}
