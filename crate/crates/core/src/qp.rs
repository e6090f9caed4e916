//! Dense convex quadratic programming and the projections built on it.
//!
//! Every subproblem the flows need reduces to
//!
//! ```text
//!     minimize     ½ ξᵀPξ + qᵀξ
//!     subject to   A_ineq ξ ≤ b_ineq
//!                  A_eq   ξ = b_eq
//! ```
//!
//! Strictly convex programs are solved with a dual active-set method in the
//! style of Goldfarb and Idnani: it starts from the unconstrained minimizer,
//! adds violated constraints one at a time, and never needs a feasible
//! starting point. When a violated constraint cannot be added the method
//! returns a Farkas certificate of infeasibility. Convex programs with a
//! singular `P` (the multiplier-space programs) are solved by a proximal-point
//! loop whose subproblems go through the strictly convex solver.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::vi::{check_dim, ConstraintSet, OperatorF, ViError};

/// Default QP optimality tolerance.
pub const DEFAULT_TOL_QP: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("Hessian is not symmetric (asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("Hessian is not positive definite (smallest eigenvalue {0:.3e})")]
    NotPositiveDefinite(f64),
    #[error("Hessian is not positive semidefinite (smallest eigenvalue {0:.3e})")]
    NotPositiveSemidefinite(f64),
    /// `certificate` is `y = (y_ineq, y_eq)` with `y_ineq ≥ 0`,
    /// `A_ineqᵀy_ineq + A_eqᵀy_eq = 0` and `b_ineqᵀy_ineq + b_eqᵀy_eq < 0`.
    #[error("constraints are infeasible (certificate gap {gap:.3e})")]
    Infeasible { certificate: DVector<f64>, gap: f64 },
    #[error("objective is unbounded below on the feasible set")]
    Unbounded,
    #[error("maximum iterations ({0}) reached")]
    MaxIterations(usize),
    #[error("point is outside the constraint set (violation {0:.3e})")]
    NotFeasible(f64),
    #[error("projection onto a smooth set did not converge")]
    ProjectionDiverged,
}

impl From<ViError> for QpError {
    fn from(e: ViError) -> Self {
        match e {
            ViError::DimensionMismatch {
                context,
                expected,
                found,
            } => QpError::DimensionMismatch {
                context,
                expected,
                found,
            },
            other => QpError::DimensionMismatch {
                context: Box::leak(other.to_string().into_boxed_str()),
                expected: 0,
                found: 0,
            },
        }
    }
}

fn dim(context: &'static str, expected: usize, found: usize) -> Result<(), QpError> {
    check_dim(context, expected, found).map_err(QpError::from)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Feasibility and optimality tolerance.
    pub tol: f64,
    /// Smallest eigenvalue accepted as positive definite.
    pub tol_pd: f64,
    /// Certificate gap above which a problem is declared infeasible.
    pub infeasibility_tol: f64,
    pub max_iter: usize,
    /// Replace nonunique multipliers by the minimum-norm multiplier.
    pub min_norm_multipliers: bool,
    /// Relative proximal weight used by [`solve_psd_qp`].
    pub prox_weight: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL_QP,
            tol_pd: 1e-12,
            infeasibility_tol: 1e-8,
            max_iter: 10_000,
            min_norm_multipliers: true,
            prox_weight: 1e-4,
        }
    }
}

/// Container for a convex QP. Inequalities are `A_ineq ξ ≤ b_ineq`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSpec {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl QpSpec {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            p,
            q,
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        }
    }

    /// `min ½‖ξ − target‖²`.
    pub fn nearest_point(target: &DVector<f64>) -> Self {
        let n = target.len();
        Self::new(DMatrix::identity(n, n), -target)
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ineq = a;
        self.b_ineq = b;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    fn check_shapes(&self) -> Result<(), QpError> {
        let n = self.dim();
        dim("P rows", n, self.p.nrows())?;
        dim("P cols", n, self.p.ncols())?;
        dim("A_ineq cols", n, self.a_ineq.ncols())?;
        dim("b_ineq length", self.a_ineq.nrows(), self.b_ineq.len())?;
        dim("A_eq cols", n, self.a_eq.ncols())?;
        dim("b_eq length", self.a_eq.nrows(), self.b_eq.len())?;
        Ok(())
    }

    fn asymmetry(&self) -> f64 {
        (&self.p - self.p.transpose()).amax()
    }

    /// Checks shapes, symmetry within 1e-12 (relative) and
    /// `λ_min(P) ≥ tol_pd`.
    pub fn validate(&self, tol_pd: f64) -> Result<(), QpError> {
        self.check_shapes()?;
        let asym = self.asymmetry();
        if asym > 1e-12 * (1.0 + self.p.amax()) {
            return Err(QpError::NotSymmetric(asym));
        }
        if self.dim() > 0 {
            let lmin = self.p.clone().symmetric_eigenvalues().min();
            if lmin < tol_pd {
                return Err(QpError::NotPositiveDefinite(lmin));
            }
        }
        Ok(())
    }

    /// Objective value `½ξᵀPξ + qᵀξ`.
    pub fn objective(&self, xi: &DVector<f64>) -> f64 {
        0.5 * xi.dot(&(&self.p * xi)) + self.q.dot(xi)
    }

    /// QP-KKT residual: the largest violation of stationarity, primal
    /// feasibility, multiplier sign and complementary slackness.
    pub fn kkt_residual(&self, xi: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let stat = (&self.p * xi + &self.q + self.a_ineq.tr_mul(u) + self.a_eq.tr_mul(v)).amax();
        let slack = &self.b_ineq - &self.a_ineq * xi;
        let primal = slack.iter().fold(0.0_f64, |a, &s| a.max(-s));
        let eq = if self.b_eq.is_empty() {
            0.0
        } else {
            (&self.a_eq * xi - &self.b_eq).amax()
        };
        let sign = u.iter().fold(0.0_f64, |a, &ui| a.max(-ui));
        let comp = u
            .iter()
            .zip(slack.iter())
            .fold(0.0_f64, |a, (ui, si)| a.max((ui * si).abs()));
        stat.max(primal).max(eq).max(sign).max(comp)
    }
}

/// Solution of a QP or of one of the projection subproblems.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub xi: DVector<f64>,
    /// Inequality multipliers, `u ≥ 0`.
    pub u: DVector<f64>,
    /// Equality multipliers.
    pub v: DVector<f64>,
    /// Inequality indices in the final working set.
    pub active_set: Vec<usize>,
    pub iterations: usize,
    /// KKT residual of the QP at the returned point.
    pub residual: f64,
}

/// Strictly convex QP with default settings.
pub fn solve_qp(spec: &QpSpec, warm_start: Option<&[usize]>) -> Result<ProjectionResult, QpError> {
    solve_qp_with(spec, warm_start, &QpSettings::default())
}

struct Row {
    normal: DVector<f64>,
    rhs: f64,
    equality: bool,
    /// +1 or −1, the orientation applied to an equality row.
    sign: f64,
}

/// Strictly convex QP, dual active-set method.
///
/// `warm_start` lists inequality indices tried first whenever they are
/// violated; the result does not depend on it.
pub fn solve_qp_with(
    spec: &QpSpec,
    warm_start: Option<&[usize]>,
    settings: &QpSettings,
) -> Result<ProjectionResult, QpError> {
    spec.validate(settings.tol_pd)?;
    let p_in = spec.a_ineq.nrows();
    let k_eq = spec.a_eq.nrows();

    let chol = spec
        .p
        .clone()
        .cholesky()
        .ok_or(QpError::NotPositiveDefinite(0.0))?;
    let l = chol.l();

    // Rows in the ≥ convention: nᵀξ ≥ rhs.
    let mut rows: Vec<Row> = Vec::with_capacity(p_in + k_eq);
    for i in 0..p_in {
        rows.push(Row {
            normal: -spec.a_ineq.row(i).transpose(),
            rhs: -spec.b_ineq[i],
            equality: false,
            sign: 1.0,
        });
    }
    for j in 0..k_eq {
        rows.push(Row {
            normal: spec.a_eq.row(j).transpose(),
            rhs: spec.b_eq[j],
            equality: true,
            sign: 1.0,
        });
    }
    let scaled: Vec<DVector<f64>> = rows
        .iter()
        .map(|r| linalg::solve_lower(&l, &r.normal))
        .collect();

    let y0 = -linalg::solve_lower(&l, &spec.q);
    let mut x = chol.solve(&(-&spec.q));
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let mut skipped_eq = vec![false; k_eq];
    let mut iterations = 0usize;
    let warm: Vec<usize> = warm_start
        .map(|w| w.iter().copied().filter(|&i| i < p_in).collect())
        .unwrap_or_default();

    let feas_tol = |r: &Row| settings.tol * (1.0 + r.rhs.abs());

    loop {
        // Choose the next constraint to add.
        let mut chosen: Option<usize> = None;
        for j in 0..k_eq {
            let idx = p_in + j;
            if !skipped_eq[j] && !active.contains(&idx) {
                chosen = Some(idx);
                break;
            }
        }
        if chosen.is_none() {
            for &i in &warm {
                if !active.contains(&i) {
                    let s = rows[i].normal.dot(&x) - rows[i].rhs;
                    if s < -feas_tol(&rows[i]) {
                        chosen = Some(i);
                        break;
                    }
                }
            }
        }
        if chosen.is_none() {
            let mut worst = 0.0;
            for i in 0..p_in {
                if active.contains(&i) {
                    continue;
                }
                let s = rows[i].normal.dot(&x) - rows[i].rhs;
                let scale = 1.0 + rows[i].normal.norm();
                if s < -feas_tol(&rows[i]) && s / scale < worst {
                    worst = s / scale;
                    chosen = Some(i);
                }
            }
        }
        let Some(pidx) = chosen else { break };

        if rows[pidx].equality {
            let s = rows[pidx].normal.dot(&x) - rows[pidx].rhs;
            if s > 0.0 {
                let row = &mut rows[pidx];
                row.normal = -&row.normal;
                row.rhs = -row.rhs;
                row.sign = -row.sign;
            }
        }
        let d = if rows[pidx].sign < 0.0 {
            -&scaled[pidx]
        } else {
            scaled[pidx].clone()
        };

        let mut up = 0.0;
        loop {
            iterations += 1;
            if iterations > settings.max_iter {
                return Err(QpError::MaxIterations(settings.max_iter));
            }
            let basis = active_basis(&active, &rows, &scaled);
            let (proj, r) = match &basis {
                Some((qm, rm)) => {
                    let qtd = qm.tr_mul(&d);
                    let r = linalg::solve_upper(rm, &qtd);
                    (&d - qm * qtd, r)
                }
                None => (d.clone(), DVector::zeros(0)),
            };
            let z = linalg::solve_upper_transpose_of_lower(&l, &proj);
            let s_p = rows[pidx].normal.dot(&x) - rows[pidx].rhs;

            // Partial step: the first active inequality multiplier to hit zero.
            let mut t1 = f64::INFINITY;
            let mut drop: Option<usize> = None;
            for (slot, &ai) in active.iter().enumerate() {
                if rows[ai].equality || r[slot] <= 1e-14 {
                    continue;
                }
                let t = mult[slot] / r[slot];
                if t < t1 || (t == t1 && drop.is_some_and(|d: usize| active[d] > ai)) {
                    t1 = t;
                    drop = Some(slot);
                }
            }
            // Full step: make constraint p tight.
            let degenerate = proj.norm() <= 1e-10 * d.norm().max(1e-300);
            let t2 = if degenerate {
                f64::INFINITY
            } else {
                let zn = z.dot(&rows[pidx].normal);
                (-s_p / zn).max(0.0)
            };
            let t = t1.min(t2);

            if t == f64::INFINITY {
                if rows[pidx].equality && s_p.abs() <= 1e-9 * (1.0 + rows[pidx].rhs.abs()) {
                    // Redundant equality already satisfied.
                    skipped_eq[pidx - p_in] = true;
                    break;
                }
                return Err(infeasibility(&rows, &active, &r, pidx, &x, p_in, k_eq));
            }

            if !degenerate {
                x += &z * t;
            }
            for (slot, m) in mult.iter_mut().enumerate() {
                *m -= t * r[slot];
            }
            up += t;

            if t2 <= t1 {
                active.push(pidx);
                mult.push(up);
                break;
            }
            let slot = drop.expect("partial step has a blocking constraint");
            active.remove(slot);
            mult.remove(slot);
        }
    }

    // Re-solve the equality-constrained problem on the final working set.
    if let Some((qm, rm)) = active_basis(&active, &rows, &scaled) {
        let b_a = DVector::from_iterator(active.len(), active.iter().map(|&i| rows[i].rhs));
        let bt_y0 = DVector::from_iterator(
            active.len(),
            active.iter().map(|&i| {
                let col = if rows[i].sign < 0.0 { -&scaled[i] } else { scaled[i].clone() };
                col.dot(&y0)
            }),
        );
        let rhs = b_a - bt_y0;
        let w = linalg::solve_upper_transpose(&rm, &rhs);
        let lambda = linalg::solve_upper(&rm, &w);
        let y = &y0 + &qm * w;
        let x_ref = linalg::solve_upper_transpose_of_lower(&l, &y);
        if lambda
            .iter()
            .zip(&active)
            .all(|(&lm, &i)| rows[i].equality || lm >= -settings.tol)
        {
            x = x_ref;
            mult = lambda.iter().copied().collect();
        }
    }

    let mut u = DVector::zeros(p_in);
    let mut v = DVector::zeros(k_eq);
    for (slot, &i) in active.iter().enumerate() {
        if rows[i].equality {
            v[i - p_in] = -mult[slot] * rows[i].sign;
        } else {
            u[i] = mult[slot].max(0.0);
        }
    }
    let mut active_set: Vec<usize> = active.iter().copied().filter(|&i| i < p_in).collect();
    active_set.sort_unstable();

    if settings.min_norm_multipliers {
        if let Some((um, vm)) = min_norm_multipliers(spec, &x, settings) {
            u = um;
            v = vm;
        }
    }

    let residual = spec.kkt_residual(&x, &u, &v);
    Ok(ProjectionResult {
        xi: x,
        u,
        v,
        active_set,
        iterations,
        residual,
    })
}

/// Thin QR of the scaled normals `L⁻¹N` of the working set.
fn active_basis(
    active: &[usize],
    rows: &[Row],
    scaled: &[DVector<f64>],
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    if active.is_empty() {
        return None;
    }
    let n = scaled[0].len();
    let mut b = DMatrix::zeros(n, active.len());
    for (c, &i) in active.iter().enumerate() {
        let col = if rows[i].sign < 0.0 { -&scaled[i] } else { scaled[i].clone() };
        b.set_column(c, &col);
    }
    let qr = b.qr();
    Some((qr.q(), qr.r()))
}

fn infeasibility(
    rows: &[Row],
    active: &[usize],
    r: &DVector<f64>,
    pidx: usize,
    x: &DVector<f64>,
    p_in: usize,
    k_eq: usize,
) -> QpError {
    // In the ≥ convention n_p = Σ r_j n_j, so y_p = 1, y_j = −r_j.
    let mut cert = DVector::zeros(p_in + k_eq);
    let mut place = |i: usize, y: f64| {
        if rows[i].equality {
            cert[i] += -y * rows[i].sign;
        } else {
            cert[i] += y;
        }
    };
    place(pidx, 1.0);
    for (slot, &ai) in active.iter().enumerate() {
        place(ai, -r[slot]);
    }
    let gap = rows[pidx].rhs - rows[pidx].normal.dot(x);
    QpError::Infeasible {
        certificate: cert,
        gap,
    }
}

/// Minimum-norm multiplier among all multipliers valid at `xi`, computed
/// only when the tight constraint gradients are linearly dependent.
fn min_norm_multipliers(
    spec: &QpSpec,
    xi: &DVector<f64>,
    settings: &QpSettings,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let p_in = spec.a_ineq.nrows();
    let k_eq = spec.a_eq.nrows();
    let slack = &spec.b_ineq - &spec.a_ineq * xi;
    let tight: Vec<usize> = (0..p_in)
        .filter(|&i| slack[i].abs() <= 1e3 * settings.tol * (1.0 + spec.b_ineq[i].abs()))
        .collect();
    let count = tight.len() + k_eq;
    if count == 0 {
        return None;
    }
    let n = spec.dim();
    let mut m = DMatrix::zeros(count, n);
    for (r, &i) in tight.iter().enumerate() {
        m.set_row(r, &spec.a_ineq.row(i));
    }
    for j in 0..k_eq {
        m.set_row(tight.len() + j, &spec.a_eq.row(j));
    }
    if linalg::rank(&m, 1e-10) == count {
        return None;
    }
    // min ½‖w‖²  s.t.  Mᵀw = −(Pξ + q),  w_tight ≥ 0.
    let grad = &spec.p * xi + &spec.q;
    let mut a_ineq = DMatrix::zeros(tight.len(), count);
    for r in 0..tight.len() {
        a_ineq[(r, r)] = -1.0;
    }
    let sub = QpSpec::new(DMatrix::identity(count, count), DVector::zeros(count))
        .with_inequalities(a_ineq, DVector::zeros(tight.len()))
        .with_equalities(m.transpose(), -grad);
    let inner = QpSettings {
        min_norm_multipliers: false,
        ..*settings
    };
    let sol = solve_qp_with(&sub, None, &inner).ok()?;
    let mut u = DVector::zeros(p_in);
    for (r, &i) in tight.iter().enumerate() {
        u[i] = sol.xi[r].max(0.0);
    }
    let v = DVector::from_iterator(k_eq, (0..k_eq).map(|j| sol.xi[tight.len() + j]));
    let candidate = spec.kkt_residual(xi, &u, &v);
    (candidate <= 10.0 * settings.tol.max(spec.kkt_residual(xi, &u, &v))).then_some((u, v))
}

/// Convex QP with a positive semidefinite `P`, solved by proximal-point
/// iterations `w⁺ = argmin ½wᵀPw + qᵀw + ρ/2‖w − w_k‖²`.
pub fn solve_psd_qp(spec: &QpSpec, settings: &QpSettings) -> Result<ProjectionResult, QpError> {
    spec.check_shapes()?;
    let asym = spec.asymmetry();
    if asym > 1e-12 * (1.0 + spec.p.amax()) {
        return Err(QpError::NotSymmetric(asym));
    }
    let n = spec.dim();
    let scale = (0..n).map(|i| spec.p[(i, i)]).fold(0.0_f64, f64::max).max(1e-8);
    if n > 0 {
        let lmin = spec.p.clone().symmetric_eigenvalues().min();
        if lmin < -1e-10 * scale {
            return Err(QpError::NotPositiveSemidefinite(lmin));
        }
    }
    let rho = settings.prox_weight * scale;
    let inner = QpSettings {
        min_norm_multipliers: false,
        ..*settings
    };
    let mut sub = spec.clone();
    for i in 0..n {
        sub.p[(i, i)] += rho;
    }
    let mut w = DVector::zeros(n);
    let mut prev_step: Option<DVector<f64>> = None;
    let mut warm: Vec<usize> = Vec::new();
    let mut total_iter = 0;
    let stop = settings.tol * 1e-2 * (1.0 + spec.q.amax());
    for _ in 0..settings.max_iter {
        sub.q = &spec.q - &w * rho;
        let sol = solve_qp_with(&sub, Some(&warm), &inner)?;
        total_iter += sol.iterations;
        let step = &sol.xi - &w;
        w = sol.xi.clone();
        warm.clone_from(&sol.active_set);
        if rho * step.amax() <= stop {
            let residual = spec.kkt_residual(&w, &sol.u, &sol.v);
            return Ok(ProjectionResult {
                xi: w,
                u: sol.u,
                v: sol.v,
                active_set: sol.active_set,
                iterations: total_iter,
                residual,
            });
        }
        if let Some(prev) = &prev_step {
            let sn = step.norm();
            if (&step - prev).norm() <= 1e-9 * sn && sn > 1e-6 * (1.0 + w.norm()) {
                let d = &step / sn;
                let pd = (&spec.p * &d).amax();
                let feasible_dir = (&spec.a_ineq * &d).iter().all(|&a| a <= 1e-9)
                    && (&spec.a_eq * &d).iter().all(|a| a.abs() <= 1e-9);
                if pd <= 1e-8 * scale && spec.q.dot(&d) < 0.0 && feasible_dir {
                    return Err(QpError::Unbounded);
                }
            }
        }
        if w.amax() > 1e12 {
            return Err(QpError::Unbounded);
        }
        prev_step = Some(step);
    }
    Err(QpError::MaxIterations(settings.max_iter))
}

/// Workspace for the projection subproblems at one constraint set. Keeps
/// the last working set for warm starts.
#[derive(Debug, Clone)]
pub struct Projector<'a> {
    set: &'a ConstraintSet,
    pub settings: QpSettings,
    /// Use closed-form clamping when the set is made of coordinate bounds.
    pub fast_path: bool,
    last_active: Vec<usize>,
}

impl<'a> Projector<'a> {
    pub fn new(set: &'a ConstraintSet) -> Self {
        Self {
            set,
            settings: QpSettings::default(),
            fast_path: true,
            last_active: Vec::new(),
        }
    }

    /// Forces every projection through the generic QP solver.
    pub fn generic(set: &'a ConstraintSet) -> Self {
        Self {
            fast_path: false,
            ..Self::new(set)
        }
    }

    pub fn set(&self) -> &ConstraintSet {
        self.set
    }

    /// `Proj_{T_C(x)}(−F(x))` given `fx = F(x)`.
    pub fn tangent_cone(
        &mut self,
        fx: &DVector<f64>,
        x: &DVector<f64>,
        tol_active: f64,
    ) -> Result<ProjectionResult, QpError> {
        let c = self.set;
        dim("tangent cone point", c.n(), x.len())?;
        dim("tangent cone F(x)", c.n(), fx.len())?;
        let violation = c.violation(x);
        if violation > tol_active {
            return Err(QpError::NotFeasible(violation));
        }
        let g = c.g(x);
        let active: Vec<usize> = (0..c.m()).filter(|&i| g[i].abs() <= tol_active).collect();
        let rhs = DVector::zeros(c.m());
        if self.fast_path {
            if let Some(res) = self.bounds_clamp(fx, Some(&active), &rhs)? {
                return Ok(res);
            }
        }
        let jg = c.g_jacobian(x);
        let mut a = DMatrix::zeros(active.len(), c.n());
        for (r, &i) in active.iter().enumerate() {
            a.set_row(r, &jg.row(i));
        }
        let spec = QpSpec::new(DMatrix::identity(c.n(), c.n()), fx.clone())
            .with_inequalities(a, DVector::zeros(active.len()))
            .with_equalities(c.h_matrix().clone(), DVector::zeros(c.k()));
        let warm: Vec<usize> = self
            .last_active
            .iter()
            .filter_map(|i| active.iter().position(|a| a == i))
            .collect();
        let sol = solve_qp_with(&spec, Some(&warm), &self.settings)?;
        let mut u = DVector::zeros(c.m());
        for (r, &i) in active.iter().enumerate() {
            u[i] = sol.u[r];
        }
        let active_set: Vec<usize> = sol.active_set.iter().map(|&r| active[r]).collect();
        self.last_active.clone_from(&active_set);
        Ok(ProjectionResult {
            xi: sol.xi,
            u,
            v: sol.v,
            active_set,
            iterations: sol.iterations,
            residual: sol.residual,
        })
    }

    /// `Proj_{T^(α)_C(x)}(−F(x))` given `fx = F(x)`.
    pub fn restricted_tangent(
        &mut self,
        fx: &DVector<f64>,
        x: &DVector<f64>,
        alpha: f64,
    ) -> Result<ProjectionResult, QpError> {
        let c = self.set;
        dim("restricted tangent point", c.n(), x.len())?;
        dim("restricted tangent F(x)", c.n(), fx.len())?;
        let rhs = -c.g(x) * alpha;
        if self.fast_path {
            if let Some(res) = self.bounds_clamp(fx, None, &rhs)? {
                return Ok(res);
            }
        }
        let spec = restricted_tangent_spec(c, fx, x, alpha);
        let warm = std::mem::take(&mut self.last_active);
        let sol = solve_qp_with(&spec, Some(&warm), &self.settings)?;
        self.last_active.clone_from(&sol.active_set);
        Ok(sol)
    }

    /// Closed form for sets of coordinate bounds: each row `a·ξⱼ ≤ rhsᵢ`
    /// restricted to `rows` (all rows when `None`).
    fn bounds_clamp(
        &self,
        fx: &DVector<f64>,
        rows: Option<&[usize]>,
        rhs: &DVector<f64>,
    ) -> Result<Option<ProjectionResult>, QpError> {
        let Some(bounds) = self.set.bounds() else {
            return Ok(None);
        };
        let n = self.set.n();
        let m = self.set.m();
        let mut lo = vec![(f64::NEG_INFINITY, usize::MAX); n];
        let mut hi = vec![(f64::INFINITY, usize::MAX); n];
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..m).collect();
                &all
            }
        };
        for &i in rows {
            let (j, upper, a) = bounds.rows()[i];
            let b = rhs[i] / a;
            if upper {
                if b < hi[j].0 {
                    hi[j] = (b, i);
                }
            } else if b > lo[j].0 {
                lo[j] = (b, i);
            }
        }
        let mut xi = DVector::zeros(n);
        let mut u = DVector::zeros(m);
        let mut active_set = Vec::new();
        for j in 0..n {
            let (l, li) = lo[j];
            let (h, hi_idx) = hi[j];
            if l > h {
                let mut cert = DVector::zeros(m);
                let (al, ah) = (bounds.rows()[li].2, bounds.rows()[hi_idx].2);
                cert[li] = 1.0 / -al;
                cert[hi_idx] = 1.0 / ah;
                let gap = cert[li] * rhs[li] + cert[hi_idx] * rhs[hi_idx];
                return Err(QpError::Infeasible {
                    certificate: cert,
                    gap,
                });
            }
            let target = -fx[j];
            if target > h {
                xi[j] = h;
                let i = hi_idx;
                u[i] = (target - h) / bounds.rows()[i].2;
                active_set.push(i);
            } else if target < l {
                xi[j] = l;
                let i = li;
                u[i] = (target - l) / bounds.rows()[i].2;
                active_set.push(i);
            } else {
                xi[j] = target;
            }
        }
        active_set.sort_unstable();
        Ok(Some(ProjectionResult {
            xi,
            u,
            v: DVector::zeros(0),
            active_set,
            iterations: 0,
            residual: 0.0,
        }))
    }

    /// Euclidean projection onto the set itself. Exact for polyhedral sets;
    /// for smooth sets, repeated projection onto the linearization.
    pub fn euclidean(&mut self, y: &DVector<f64>) -> Result<DVector<f64>, QpError> {
        let c = self.set;
        dim("projection point", c.n(), y.len())?;
        if self.fast_path {
            if let Some(b) = c.bounds() {
                return Ok(b.clamp(y));
            }
        }
        if let Some((g, cg)) = c.polyhedral_data() {
            let spec = QpSpec::nearest_point(y)
                .with_inequalities(g.clone(), cg.clone())
                .with_equalities(c.h_matrix().clone(), c.c_h().clone());
            let warm = std::mem::take(&mut self.last_active);
            let sol = solve_qp_with(&spec, Some(&warm), &self.settings)?;
            self.last_active = sol.active_set;
            return Ok(sol.xi);
        }
        // Sequential QP on the Lagrangian of min ½‖w − y‖² s.t. g(w) ≤ 0.
        let n = c.n();
        let mut z = y.clone();
        let mut u = DVector::zeros(c.m());
        for _ in 0..200 {
            let gz = c.g(&z);
            let jz = c.g_jacobian(&z);
            let mut hess = DMatrix::identity(n, n);
            if u.iter().any(|&ui| ui > 0.0) {
                let hs = c.g_hessians(&z).unwrap_or_else(|| fd_hessians(c, &z));
                for (i, hi) in hs.iter().enumerate() {
                    hess += hi * u[i];
                }
                hess = (&hess + hess.transpose()) * 0.5;
            }
            // g(z) + J(z)(w − z) ≤ 0  ⇔  J w ≤ J z − g(z)
            let spec = QpSpec::new(hess.clone(), &z - y - &hess * &z)
                .with_inequalities(jz.clone(), &jz * &z - gz)
                .with_equalities(c.h_matrix().clone(), c.c_h().clone());
            let sol = solve_qp_with(&spec, None, &self.settings)?;
            let step = (&sol.xi - &z).norm();
            z = sol.xi;
            u = sol.u;
            if step <= 1e-13 * (1.0 + z.norm()) {
                return Ok(z);
            }
        }
        if c.violation(&z) <= 1e-9 {
            Ok(z)
        } else {
            Err(QpError::ProjectionDiverged)
        }
    }
}

/// Central-difference Hessians of each `gᵢ` from the Jacobian.
fn fd_hessians(c: &ConstraintSet, z: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let (n, m) = (c.n(), c.m());
    let mut hs = vec![DMatrix::zeros(n, n); m];
    for j in 0..n {
        let d = 1e-6 * (1.0 + z[j].abs());
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += d;
        zm[j] -= d;
        let diff = (c.g_jacobian(&zp) - c.g_jacobian(&zm)) / (2.0 * d);
        for (i, h) in hs.iter_mut().enumerate() {
            for k in 0..n {
                h[(k, j)] = diff[(i, k)];
            }
        }
    }
    hs.into_iter().map(|h| (&h + h.transpose()) * 0.5).collect()
}

fn restricted_tangent_spec(c: &ConstraintSet, fx: &DVector<f64>, x: &DVector<f64>, alpha: f64) -> QpSpec {
    QpSpec::new(DMatrix::identity(c.n(), c.n()), fx.clone())
        .with_inequalities(c.g_jacobian(x), -c.g(x) * alpha)
        .with_equalities(c.h_matrix().clone(), -c.h(x) * alpha)
}

/// Projection of `−F(x)` onto the tangent cone of `C` at a feasible `x`.
pub fn project_tangent_cone(
    f: &OperatorF,
    c: &ConstraintSet,
    x: &DVector<f64>,
    tol_active: f64,
) -> Result<ProjectionResult, QpError> {
    dim("operator dimension", c.n(), f.dim())?;
    Projector::new(c).tangent_cone(&f.eval(x), x, tol_active)
}

/// Projection of `−F(x)` onto the α-restricted tangent set at `x`.
pub fn project_restricted_tangent(
    f: &OperatorF,
    c: &ConstraintSet,
    x: &DVector<f64>,
    alpha: f64,
) -> Result<ProjectionResult, QpError> {
    dim("operator dimension", c.n(), f.dim())?;
    Projector::new(c).restricted_tangent(&f.eval(x), x, alpha)
}

/// Euclidean projection onto `C`.
pub fn project_onto_set(c: &ConstraintSet, y: &DVector<f64>) -> Result<DVector<f64>, QpError> {
    Projector::new(c).euclidean(y)
}

/// Multiplier-space solution of the safe-feedback program.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    /// `ξ = −F(x) − ∂g/∂xᵀu − Hᵀv`.
    pub xi: DVector<f64>,
    /// Gram matrix `Q̃` and linear term `c` of the program.
    pub gram: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub iterations: usize,
}

impl DualSolution {
    /// Stacked `(u, v)`.
    pub fn multipliers(&self) -> DVector<f64> {
        let mut w = DVector::zeros(self.u.len() + self.v.len());
        w.rows_mut(0, self.u.len()).copy_from(&self.u);
        w.rows_mut(self.u.len(), self.v.len()).copy_from(&self.v);
        w
    }
}

/// The convex program over `(u, v) ∈ R^m_{≥0} × R^k`
///
/// ```text
///     ½‖∂gᵀu + Hᵀv‖² + uᵀ(∂g F(x) − αg(x)) + vᵀ(H F(x) − αh(x))
/// ```
///
/// whose minimizers are safe feedbacks.
pub fn dual_qp_spec(fx: &DVector<f64>, c: &ConstraintSet, x: &DVector<f64>, alpha: f64) -> QpSpec {
    let (m, k) = (c.m(), c.k());
    let a = c.stacked_jacobian(x);
    let gram = &a * a.transpose();
    let mut lin = &a * fx;
    let g = c.g(x);
    let h = c.h(x);
    for i in 0..m {
        lin[i] -= alpha * g[i];
    }
    for j in 0..k {
        lin[m + j] -= alpha * h[j];
    }
    let mut a_ineq = DMatrix::zeros(m, m + k);
    for i in 0..m {
        a_ineq[(i, i)] = -1.0;
    }
    let gram = (&gram + gram.transpose()) * 0.5;
    QpSpec::new(gram, lin).with_inequalities(a_ineq, DVector::zeros(m))
}

pub fn solve_dual_qp(
    f: &OperatorF,
    c: &ConstraintSet,
    x: &DVector<f64>,
    alpha: f64,
) -> Result<DualSolution, QpError> {
    dim("operator dimension", c.n(), f.dim())?;
    dim("dual point", c.n(), x.len())?;
    let fx = f.eval(x);
    let spec = dual_qp_spec(&fx, c, x, alpha);
    let sol = solve_psd_qp(&spec, &QpSettings::default())?;
    let (m, k) = (c.m(), c.k());
    let u = DVector::from_iterator(m, sol.xi.iter().take(m).map(|&ui| ui.max(0.0)));
    let v = DVector::from_iterator(k, sol.xi.iter().skip(m).copied());
    let xi = -&fx - c.g_jacobian(x).tr_mul(&u) - c.h_matrix().tr_mul(&v);
    Ok(DualSolution {
        u,
        v,
        xi,
        gram: spec.p,
        linear: spec.q,
        iterations: sol.iterations,
    })
}

/// Closed-loop field of the controller that minimizes the input effort
/// `½‖∂gᵀu + Hᵀv‖²` over the admissible set `K_proj(x)` (tangent-cone
/// conditions on the active rows).
pub fn control_tangent_cone(
    f: &OperatorF,
    c: &ConstraintSet,
    x: &DVector<f64>,
    tol_active: f64,
) -> Result<DualSolution, QpError> {
    let violation = c.violation(x);
    if violation > tol_active {
        return Err(QpError::NotFeasible(violation));
    }
    let g = c.g(x);
    let rows: Vec<usize> = (0..c.m()).filter(|&i| g[i].abs() <= tol_active).collect();
    control_qp(f, c, x, &rows, &DVector::zeros(c.m()), &DVector::zeros(c.k()))
}

/// Closed-loop field of the CBF-QP controller over `K_cbf,α(x)`.
pub fn control_cbf(
    f: &OperatorF,
    c: &ConstraintSet,
    x: &DVector<f64>,
    alpha: f64,
) -> Result<DualSolution, QpError> {
    let rows: Vec<usize> = (0..c.m()).collect();
    control_qp(f, c, x, &rows, &(-c.g(x) * alpha), &(-c.h(x) * alpha))
}

/// `min ½‖Aᵀw‖²` over `u ≥ 0` and `∂g_R ℱ(x,u,v) ≤ rhs_g[R]`, `H ℱ = rhs_h`,
/// where `ℱ = −F − Aᵀw` and `A = [∂g; H]`.
fn control_qp(
    f: &OperatorF,
    c: &ConstraintSet,
    x: &DVector<f64>,
    rows: &[usize],
    rhs_g: &DVector<f64>,
    rhs_h: &DVector<f64>,
) -> Result<DualSolution, QpError> {
    dim("operator dimension", c.n(), f.dim())?;
    let (m, k) = (c.m(), c.k());
    let fx = f.eval(x);
    let a = c.stacked_jacobian(x);
    let gram = &a * a.transpose();
    let gram = (&gram + gram.transpose()) * 0.5;
    let af = &a * &fx;
    // ∂g_i ℱ = −(AF)_i − (gram w)_i ≤ rhs_i  ⇔  −gram_i w ≤ rhs_i + (AF)_i
    let mut a_ineq = DMatrix::zeros(m + rows.len(), m + k);
    let mut b_ineq = DVector::zeros(m + rows.len());
    for i in 0..m {
        a_ineq[(i, i)] = -1.0;
    }
    for (r, &i) in rows.iter().enumerate() {
        a_ineq.set_row(m + r, &(-gram.row(i)));
        b_ineq[m + r] = rhs_g[i] + af[i];
    }
    let mut a_eq = DMatrix::zeros(k, m + k);
    let mut b_eq = DVector::zeros(k);
    for j in 0..k {
        a_eq.set_row(j, &(-gram.row(m + j)));
        b_eq[j] = rhs_h[j] + af[m + j];
    }
    let spec = QpSpec::new(gram.clone(), DVector::zeros(m + k))
        .with_inequalities(a_ineq, b_ineq)
        .with_equalities(a_eq, b_eq);
    let sol = solve_psd_qp(&spec, &QpSettings::default())?;
    let u = DVector::from_iterator(m, sol.xi.iter().take(m).map(|&ui| ui.max(0.0)));
    let v = DVector::from_iterator(k, sol.xi.iter().skip(m).copied());
    let xi = -&fx - c.g_jacobian(x).tr_mul(&u) - c.h_matrix().tr_mul(&v);
    Ok(DualSolution {
        u,
        v,
        xi,
        gram,
        linear: af,
        iterations: sol.iterations,
    })
}

/// Outcome of [`qp_lp_consistency`].
#[derive(Debug, Clone, PartialEq)]
pub struct LpConsistency {
    pub consistent: bool,
    /// First index whose reduced cost or complementarity fails.
    pub violating_index: Option<usize>,
}

/// Checks that `w* = (u*, v*)` also minimizes the linear program with
/// cost `(Q̃w* + c)ᵀw` over `u ≥ 0, v free`: reduced costs nonnegative on
/// `u`, zero on `v`, complementary with `u*`.
pub fn qp_lp_consistency(
    gram: &DMatrix<f64>,
    linear: &DVector<f64>,
    w: &DVector<f64>,
    m: usize,
    tol: f64,
) -> LpConsistency {
    let d = gram * w + linear;
    let scale = 1.0 + linear.amax() + w.amax();
    let t = tol * scale;
    for i in 0..w.len() {
        let ok = if i < m {
            w[i] >= -t && d[i] >= -t && (w[i] * d[i]).abs() <= t * scale
        } else {
            d[i].abs() <= t
        };
        if !ok {
            return LpConsistency {
                consistent: false,
                violating_index: Some(i),
            };
        }
    }
    LpConsistency {
        consistent: true,
        violating_index: None,
    }
}
