//! Integration of the projected, safe and recursive safe monotone flows.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis;
use crate::qp::{ProjectionResult, Projector, QpError};
use crate::vi::{check_dim, ConstraintSet, OperatorF, ViError};

/// Number of consecutive small-field steps that declares convergence.
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Pmf,
    Smf,
    Rsmf,
}

impl FlowKind {
    pub const ALL: [FlowKind; 3] = [FlowKind::Pmf, FlowKind::Smf, FlowKind::Rsmf];

    pub fn name(self) -> &'static str {
        match self {
            FlowKind::Pmf => "pmf",
            FlowKind::Smf => "smf",
            FlowKind::Rsmf => "rsmf",
        }
    }
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FlowKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pmf" => Ok(FlowKind::Pmf),
            "smf" => Ok(FlowKind::Smf),
            "rsmf" => Ok(FlowKind::Rsmf),
            other => Err(format!("unknown flow '{other}' (expected pmf, smf or rsmf)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Dimension(#[from] ViError),
    #[error("point is outside the constraint set (violation {0:.3e})")]
    NotFeasible(f64),
    #[error("point is outside the domain of the safe flow: {0}")]
    OutsideDomain(QpError),
    #[error(transparent)]
    Projection(QpError),
    #[error("integration aborted at t = {t}: {source}")]
    Aborted {
        t: f64,
        source: Box<FlowError>,
        partial: Box<Trajectory>,
    },
}

impl FlowError {
    /// True for errors caused by the state leaving the region where the
    /// flow is defined.
    pub fn is_domain_error(&self) -> bool {
        match self {
            FlowError::NotFeasible(_) | FlowError::OutsideDomain(_) => true,
            FlowError::Aborted { source, .. } => source.is_domain_error(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Fixed step size.
    pub h: f64,
    pub t_final: f64,
    pub tol_converge: f64,
    pub tol_active: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            tau: 0.25,
            h: 1e-3,
            t_final: 15.0,
            tol_converge: 1e-8,
            tol_active: 1e-8,
        }
    }
}

impl FlowParams {
    pub fn validate(&self, kind: FlowKind) -> Result<(), FlowError> {
        let named = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("tau", self.tau),
            ("h", self.h),
            ("t_final", self.t_final),
            ("tol_converge", self.tol_converge),
            ("tol_active", self.tol_active),
        ];
        for (name, value) in named {
            if !(value.is_finite() && value > 0.0) {
                return Err(FlowError::InvalidParams(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if kind == FlowKind::Rsmf && self.h > self.tau / 10.0 * (1.0 + 1e-12) {
            return Err(FlowError::InvalidParams(format!(
                "recursive flow needs h ≤ tau/10 (h = {}, tau = {})",
                self.h, self.tau
            )));
        }
        Ok(())
    }

    /// Number of steps covering `[0, t_final]`.
    pub fn steps(&self) -> usize {
        (self.t_final / self.h - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub t: f64,
}

impl FlowState {
    pub fn new(x: DVector<f64>, u: DVector<f64>, v: DVector<f64>, t: f64) -> Self {
        Self { x, u, v, t }
    }

    /// State at `t = 0` with zero multipliers.
    pub fn primal(x: DVector<f64>, c: &ConstraintSet) -> Self {
        Self::new(x, DVector::zeros(c.m()), DVector::zeros(c.k()), 0.0)
    }
}

/// Lyapunov values at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovValues {
    pub v: f64,
    pub w: f64,
    pub v_eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub gmax: f64,
    pub hmax: f64,
    pub field_norm: f64,
    pub qp_iterations: usize,
    /// `‖(u, v) − κ(x)‖` for the recursive flow.
    pub tracking_error: Option<f64>,
    pub lyapunov: Option<LyapunovValues>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub kind: FlowKind,
    pub h: f64,
    pub alpha: f64,
    pub states: Vec<FlowState>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Time at which the convergence window completed.
    pub converged_at: Option<f64>,
    pub warnings: Vec<String>,
}

impl Trajectory {
    fn new(kind: FlowKind, params: &FlowParams) -> Self {
        Self {
            kind,
            h: params.h,
            alpha: params.alpha,
            states: Vec::new(),
            diagnostics: Vec::new(),
            converged_at: None,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn converged(&self) -> bool {
        self.converged_at.is_some()
    }

    pub fn last(&self) -> &FlowState {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    /// Largest constraint value over the whole trajectory.
    pub fn max_gmax(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.gmax)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_hmax(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.hmax).fold(0.0, f64::max)
    }

    /// Supremum of the feedback tracking error, when recorded.
    pub fn max_tracking_error(&self) -> Option<f64> {
        self.diagnostics
            .iter()
            .map(|d| d.tracking_error)
            .try_fold(0.0_f64, |acc, e| e.map(|e| acc.max(e)))
    }

    /// True when both trajectories share the same time grid.
    pub fn same_grid(&self, other: &Trajectory) -> bool {
        self.len() == other.len()
            && self
                .states
                .iter()
                .zip(&other.states)
                .all(|(a, b)| (a.t - b.t).abs() <= 1e-12 * (1.0 + a.t.abs()))
    }

    /// `‖x_a(t) − x_b(t)‖` along a shared grid.
    pub fn distances(&self, other: &Trajectory) -> Option<Vec<f64>> {
        self.same_grid(other).then(|| {
            self.states
                .iter()
                .zip(&other.states)
                .map(|(a, b)| (&a.x - &b.x).norm())
                .collect()
        })
    }
}

/// Optional extras computed during integration.
#[derive(Debug, Clone, Default)]
pub struct IntegrateOptions {
    /// Record `V`, `W` and `V_ε` relative to a known solution.
    pub lyapunov: Option<LyapunovSpec>,
    /// Record the recursive flow's tracking error.
    pub track_feedback: bool,
    /// Stop once convergence is declared.
    pub stop_on_converge: bool,
}

#[derive(Debug, Clone)]
pub struct LyapunovSpec {
    pub x_star: DVector<f64>,
    /// Penalty weight of `V_ε`; chosen automatically when `None`.
    pub epsilon: Option<f64>,
}

impl LyapunovSpec {
    pub fn new(x_star: DVector<f64>) -> Self {
        Self {
            x_star,
            epsilon: None,
        }
    }
}

fn map_domain(e: QpError) -> FlowError {
    match e {
        QpError::Infeasible { .. } | QpError::Unbounded => FlowError::OutsideDomain(e),
        QpError::NotFeasible(v) => FlowError::NotFeasible(v),
        other => FlowError::Projection(other),
    }
}

/// Projected monotone field `Proj_{T_C(x)}(−F(x))`.
pub fn pmf_field(
    f: &OperatorF,
    c: &ConstraintSet,
    x: &DVector<f64>,
    tol_active: f64,
) -> Result<DVector<f64>, FlowError> {
    check_dim("operator dimension", c.n(), f.dim())?;
    check_dim("state", c.n(), x.len())?;
    Projector::new(c)
        .tangent_cone(&f.eval(x), x, tol_active)
        .map(|r| r.xi)
        .map_err(map_domain)
}

/// Safe monotone field `𝒢_α(x)` with its multipliers.
pub fn smf_field(
    f: &OperatorF,
    c: &ConstraintSet,
    x: &DVector<f64>,
    alpha: f64,
) -> Result<ProjectionResult, FlowError> {
    check_dim("operator dimension", c.n(), f.dim())?;
    check_dim("state", c.n(), x.len())?;
    Projector::new(c)
        .restricted_tangent(&f.eval(x), x, alpha)
        .map_err(map_domain)
}

/// Right-hand side of the recursive safe monotone flow.
pub fn rsmf_field(
    f: &OperatorF,
    c: &ConstraintSet,
    state: &FlowState,
    alpha: f64,
    beta: f64,
    tau: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), FlowError> {
    check_dim("operator dimension", c.n(), f.dim())?;
    check_dim("state x", c.n(), state.x.len())?;
    check_dim("state u", c.m(), state.u.len())?;
    check_dim("state v", c.k(), state.v.len())?;
    Ok(rsmf_rhs(f, c, &state.x, &state.u, &state.v, alpha, beta, tau))
}

#[allow(clippy::too_many_arguments)]
fn rsmf_rhs(
    f: &OperatorF,
    c: &ConstraintSet,
    x: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
    alpha: f64,
    beta: f64,
    tau: f64,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let jg = c.g_jacobian(x);
    let hm = c.h_matrix();
    let dx = -f.eval(x) - jg.tr_mul(u) - hm.tr_mul(v);
    let g = c.g(x);
    let gd = &jg * &dx + &g * alpha;
    let du = DVector::from_iterator(u.len(), (0..u.len()).map(|i| (-beta * u[i]).max(gd[i]) / tau));
    let dv = (hm * &dx + c.h(x) * alpha) / tau;
    (dx, du, dv)
}

/// Projected Euler integration of the projected monotone flow.
pub fn integrate_pmf(
    f: &OperatorF,
    c: &ConstraintSet,
    x0: &DVector<f64>,
    params: &FlowParams,
) -> Result<Trajectory, FlowError> {
    integrate(FlowKind::Pmf, f, c, &FlowState::primal(x0.clone(), c), params, &IntegrateOptions::default())
}

/// RK4 integration of the safe monotone flow.
pub fn integrate_smf(
    f: &OperatorF,
    c: &ConstraintSet,
    x0: &DVector<f64>,
    params: &FlowParams,
) -> Result<Trajectory, FlowError> {
    integrate(FlowKind::Smf, f, c, &FlowState::primal(x0.clone(), c), params, &IntegrateOptions::default())
}

/// RK4 integration of the recursive safe monotone flow, tracking error
/// included.
pub fn integrate_rsmf(
    f: &OperatorF,
    c: &ConstraintSet,
    state0: &FlowState,
    params: &FlowParams,
) -> Result<Trajectory, FlowError> {
    let options = IntegrateOptions {
        track_feedback: true,
        ..IntegrateOptions::default()
    };
    integrate(FlowKind::Rsmf, f, c, state0, params, &options)
}

struct Lyap {
    x_star: DVector<f64>,
    epsilon: f64,
}

/// Integrates any of the three flows from `state0` on `[0, t_final]`.
pub fn integrate(
    kind: FlowKind,
    f: &OperatorF,
    c: &ConstraintSet,
    state0: &FlowState,
    params: &FlowParams,
    options: &IntegrateOptions,
) -> Result<Trajectory, FlowError> {
    params.validate(kind)?;
    check_dim("operator dimension", c.n(), f.dim())?;
    check_dim("initial x", c.n(), state0.x.len())?;
    if kind == FlowKind::Rsmf {
        check_dim("initial u", c.m(), state0.u.len())?;
        check_dim("initial v", c.k(), state0.v.len())?;
        if state0.u.iter().any(|&u| u < 0.0) {
            return Err(FlowError::InvalidParams("initial u must be nonnegative".into()));
        }
    }
    if kind == FlowKind::Pmf {
        let violation = c.violation(&state0.x);
        if violation > params.tol_active {
            return Err(FlowError::NotFeasible(violation));
        }
    }
    let lyap = match &options.lyapunov {
        Some(spec) => {
            check_dim("solution estimate", c.n(), spec.x_star.len())?;
            let epsilon = match spec.epsilon {
                Some(e) => e,
                None => analysis::default_epsilon(f, c, &spec.x_star, params.alpha)
                    .map_err(FlowError::Projection)?,
            };
            Some(Lyap {
                x_star: spec.x_star.clone(),
                epsilon,
            })
        }
        None => None,
    };

    let mut runner = Runner {
        kind,
        f,
        c,
        params,
        options,
        lyap,
        projector: Projector::new(c),
        aux: Projector::new(c),
        traj: Trajectory::new(kind, params),
        small_steps: 0,
        stiff_warned: false,
    };
    match runner.run(state0) {
        Ok(()) => Ok(runner.traj),
        Err((t, e)) => {
            if runner.traj.is_empty() {
                Err(e)
            } else {
                Err(FlowError::Aborted {
                    t,
                    source: Box::new(e),
                    partial: Box::new(runner.traj),
                })
            }
        }
    }
}

struct Runner<'a> {
    kind: FlowKind,
    f: &'a OperatorF,
    c: &'a ConstraintSet,
    params: &'a FlowParams,
    options: &'a IntegrateOptions,
    lyap: Option<Lyap>,
    projector: Projector<'a>,
    aux: Projector<'a>,
    traj: Trajectory,
    small_steps: usize,
    stiff_warned: bool,
}

impl Runner<'_> {
    fn run(&mut self, state0: &FlowState) -> Result<(), (f64, FlowError)> {
        let steps = self.params.steps();
        let h = self.params.h;
        let (m, k) = (self.c.m(), self.c.k());
        let mut x = state0.x.clone();
        let mut u = state0.u.clone();
        let mut v = state0.v.clone();
        for step in 0..=steps {
            let t = step as f64 * h;
            let fail = |e| (t, e);
            match self.kind {
                FlowKind::Pmf => {
                    let fx = self.f.eval(&x);
                    let res = self
                        .projector
                        .tangent_cone(&fx, &x, self.params.tol_active)
                        .map_err(|e| fail(map_domain(e)))?;
                    let norm = res.xi.norm();
                    self.record(&x, &res.u, &res.v, t, norm, res.iterations, None)
                        .map_err(fail)?;
                    if step == steps || self.done() {
                        break;
                    }
                    let y = &x + &res.xi * h;
                    x = self
                        .projector
                        .euclidean(&y)
                        .map_err(|e| fail(FlowError::Projection(e)))?;
                }
                FlowKind::Smf => {
                    let first = self.smf(&x).map_err(fail)?;
                    let norm = first.xi.norm();
                    self.record(&x, &first.u, &first.v, t, norm, first.iterations, Some(&first))
                        .map_err(fail)?;
                    if step == steps || self.done() {
                        break;
                    }
                    let k1 = first.xi;
                    let k2 = self.smf(&(&x + &k1 * (h / 2.0))).map_err(fail)?.xi;
                    let k3 = self.smf(&(&x + &k2 * (h / 2.0))).map_err(fail)?.xi;
                    let k4 = self.smf(&(&x + &k3 * h)).map_err(fail)?.xi;
                    self.stiffness_check(t, &k1, &k2);
                    x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                }
                FlowKind::Rsmf => {
                    let (p, tau, alpha, beta) = (self.params, self.params.tau, self.params.alpha, self.params.beta);
                    let rhs = |x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>| {
                        stack(&rsmf_rhs(self.f, self.c, x, u, v, alpha, beta, tau))
                    };
                    let k1 = rhs(&x, &u, &v);
                    let tracking = if self.options.track_feedback {
                        let kappa = self
                            .aux
                            .restricted_tangent(&self.f.eval(&x), &x, p.alpha)
                            .map_err(|e| fail(map_domain(e)))?;
                        let du = &u - &kappa.u;
                        let dv = &v - &kappa.v;
                        Some((du.norm_squared() + dv.norm_squared()).sqrt())
                    } else {
                        None
                    };
                    let (u_rec, v_rec) = (u.clone(), v.clone());
                    self.record(&x, &u_rec, &v_rec, t, k1.norm(), 0, None).map_err(fail)?;
                    if let Some(e) = tracking {
                        self.traj.diagnostics.last_mut().unwrap().tracking_error = Some(e);
                    }
                    if step == steps || self.done() {
                        break;
                    }
                    let z = stack(&(x.clone(), u.clone(), v.clone()));
                    let at = |w: &DVector<f64>| unstack(w, x.len(), m, k);
                    let (x2, u2, v2) = at(&(&z + &k1 * (h / 2.0)));
                    let k2 = rhs(&x2, &u2, &v2);
                    let (x3, u3, v3) = at(&(&z + &k2 * (h / 2.0)));
                    let k3 = rhs(&x3, &u3, &v3);
                    let (x4, u4, v4) = at(&(&z + &k3 * h));
                    let k4 = rhs(&x4, &u4, &v4);
                    self.stiffness_check(t, &k1, &k2);
                    let z = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                    (x, u, v) = at(&z);
                }
            }
        }
        Ok(())
    }

    fn smf(&mut self, x: &DVector<f64>) -> Result<ProjectionResult, FlowError> {
        let fx = self.f.eval(x);
        self.projector
            .restricted_tangent(&fx, x, self.params.alpha)
            .map_err(map_domain)
    }

    fn done(&self) -> bool {
        self.options.stop_on_converge && self.traj.converged_at.is_some()
    }

    /// Flags steps where `h` times the local Lipschitz estimate approaches
    /// the RK4 stability limit.
    fn stiffness_check(&mut self, t: f64, k1: &DVector<f64>, k2: &DVector<f64>) {
        if self.stiff_warned {
            return;
        }
        let h = self.params.h;
        let base = k1.norm() * h / 2.0;
        if base <= 1e-300 {
            return;
        }
        let lipschitz = (k2 - k1).norm() / base;
        if h * lipschitz > 2.5 {
            self.stiff_warned = true;
            self.traj.warnings.push(format!(
                "stiffness warning at t = {t:.6}: h·L ≈ {:.3}; consider a smaller step",
                h * lipschitz
            ));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
        t: f64,
        field_norm: f64,
        qp_iterations: usize,
        smf: Option<&ProjectionResult>,
    ) -> Result<(), FlowError> {
        let g = self.c.g(x);
        let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let hv = self.c.h(x);
        let hmax = if hv.is_empty() { 0.0 } else { hv.amax() };
        let lyapunov = match &self.lyap {
            Some(l) => {
                let owned;
                let proj = match smf {
                    Some(p) => p,
                    None => {
                        owned = self
                            .aux
                            .restricted_tangent(&self.f.eval(x), x, self.params.alpha)
                            .map_err(map_domain)?;
                        &owned
                    }
                };
                Some(analysis::lyapunov_values(
                    self.c,
                    x,
                    self.params.alpha,
                    proj,
                    &l.x_star,
                    l.epsilon,
                ))
            }
            None => None,
        };
        if field_norm <= self.params.tol_converge {
            self.small_steps += 1;
            if self.small_steps >= CONVERGENCE_WINDOW && self.traj.converged_at.is_none() {
                self.traj.converged_at = Some(t);
            }
        } else {
            self.small_steps = 0;
        }
        self.traj.states.push(FlowState::new(x.clone(), u.clone(), v.clone(), t));
        self.traj.diagnostics.push(StepDiagnostics {
            gmax,
            hmax,
            field_norm,
            qp_iterations,
            tracking_error: None,
            lyapunov,
        });
        Ok(())
    }
}

fn stack(parts: &(DVector<f64>, DVector<f64>, DVector<f64>)) -> DVector<f64> {
    let (a, b, c) = parts;
    let mut z = DVector::zeros(a.len() + b.len() + c.len());
    z.rows_mut(0, a.len()).copy_from(a);
    z.rows_mut(a.len(), b.len()).copy_from(b);
    z.rows_mut(a.len() + b.len(), c.len()).copy_from(c);
    z
}

fn unstack(z: &DVector<f64>, n: usize, m: usize, k: usize) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    (
        z.rows(0, n).into_owned(),
        z.rows(n, m).into_owned(),
        z.rows(n + m, k).into_owned(),
    )
}
