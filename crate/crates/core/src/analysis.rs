//! Certificates evaluated along trajectories: Lyapunov functions, Dini
//! derivative bounds, contraction rates and practical-safety margins.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flows::{LyapunovValues, Trajectory};
use crate::linalg;
use crate::qp::{ProjectionResult, Projector, QpError};
use crate::vi::{ConstraintSet, OperatorF};

/// Distance below which trajectory pairs are considered merged.
pub const CONTRACTION_FLOOR: f64 = 1e-6;

/// Default multiplier of the `h·(1 + ‖𝒢‖)` discretization slack.
pub const DEFAULT_SLACK_FACTOR: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("trajectories coincide from the start; no contraction window")]
    DegenerateWindow,
    #[error("trajectories are not on the same time grid")]
    GridMismatch,
    #[error(transparent)]
    Projection(#[from] QpError),
}

/// `Ṽ(x) = ½‖x − x*‖²`.
pub fn eval_v_tilde(x: &DVector<f64>, x_star: &DVector<f64>) -> f64 {
    0.5 * (x - x_star).norm_squared()
}

/// Closed form `W(x) = −½‖𝒢_α(x)‖² + αuᵀg(x) + αvᵀh(x)` from the
/// restricted-tangent projection at `x`.
pub fn eval_w(c: &ConstraintSet, x: &DVector<f64>, alpha: f64, proj: &ProjectionResult) -> f64 {
    let hv = c.h(x);
    let vh = if proj.v.is_empty() { 0.0 } else { proj.v.dot(&hv) };
    -0.5 * proj.xi.norm_squared() + alpha * proj.u.dot(&c.g(x)) + alpha * vh
}

/// Variational form `ξᵀF(x) + ½‖ξ‖²` at `ξ = 𝒢_α(x)`.
pub fn eval_w_variational(f: &OperatorF, x: &DVector<f64>, proj: &ProjectionResult) -> f64 {
    proj.xi.dot(&f.eval(x)) + 0.5 * proj.xi.norm_squared()
}

/// `V(x) = Ṽ(x) − W(x)/α²`.
pub fn eval_v(
    c: &ConstraintSet,
    x: &DVector<f64>,
    x_star: &DVector<f64>,
    alpha: f64,
    proj: &ProjectionResult,
) -> f64 {
    eval_v_tilde(x, x_star) - eval_w(c, x, alpha, proj) / (alpha * alpha)
}

/// ℓ¹ penalty `δ_ε(x) = (Σ[g_i]₊ + Σ|h_j|)/ε`.
pub fn delta_eps(c: &ConstraintSet, x: &DVector<f64>, epsilon: f64) -> f64 {
    let pos: f64 = c.g(x).iter().map(|&g| g.max(0.0)).sum();
    let eq: f64 = c.h(x).iter().map(|h| h.abs()).sum();
    (pos + eq) / epsilon
}

/// `V_ε(x) = Ṽ(x) + [−W(x)/α²]₊ + δ_ε(x)`.
pub fn eval_v_eps(
    f: &OperatorF,
    c: &ConstraintSet,
    x: &DVector<f64>,
    x_star: &DVector<f64>,
    alpha: f64,
    epsilon: f64,
) -> Result<f64, QpError> {
    let proj = Projector::new(c).restricted_tangent(&f.eval(x), x, alpha)?;
    Ok(lyapunov_values(c, x, alpha, &proj, x_star, epsilon).v_eps)
}

/// `V`, `W` and `V_ε` at one point.
pub fn lyapunov_values(
    c: &ConstraintSet,
    x: &DVector<f64>,
    alpha: f64,
    proj: &ProjectionResult,
    x_star: &DVector<f64>,
    epsilon: f64,
) -> LyapunovValues {
    let vt = eval_v_tilde(x, x_star);
    let w = eval_w(c, x, alpha, proj);
    let a2 = alpha * alpha;
    LyapunovValues {
        v: vt - w / a2,
        w,
        v_eps: vt + (-w / a2).max(0.0) + delta_eps(c, x, epsilon),
    }
}

/// Multipliers `(u*, v*)` at a solution, from the restricted projection.
pub fn solution_multipliers(
    f: &OperatorF,
    c: &ConstraintSet,
    x_star: &DVector<f64>,
    alpha: f64,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    let p = Projector::new(c).restricted_tangent(&f.eval(x_star), x_star, alpha)?;
    Ok((p.u, p.v))
}

/// `ε = α / (2(‖(u*, v*)‖_∞ + 1))`, which satisfies `α/ε > ‖(u*, v*)‖_∞`.
pub fn default_epsilon(
    f: &OperatorF,
    c: &ConstraintSet,
    x_star: &DVector<f64>,
    alpha: f64,
) -> Result<f64, QpError> {
    let (u, v) = solution_multipliers(f, c, x_star, alpha)?;
    let norm = u.iter().chain(v.iter()).fold(0.0_f64, |a, b| a.max(b.abs()));
    Ok(alpha / (2.0 * (norm + 1.0)))
}

/// `Q(x, u) = ½(∂F + ∂Fᵀ) + Σ uᵢ∇²gᵢ(x)`, when the needed derivatives exist.
pub fn curvature_matrix(
    f: &OperatorF,
    c: &ConstraintSet,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Option<DMatrix<f64>> {
    let j = f.jacobian(x)?;
    let mut q = (&j + j.transpose()) * 0.5;
    for (i, hess) in c.g_hessians(x)?.iter().enumerate() {
        q += hess * u[i];
    }
    Some(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiniKind {
    /// `D⁺V ≤ −μ‖x − x*‖²`.
    VRelativeC,
    /// `D⁺Ṽ ≤ −μ‖x − x*‖² − (u − u*)ᵀ(g − g*) − (v − v*)ᵀh`.
    VTilde,
    /// `D⁺V_ε ≤ −μ‖x − x*‖²`.
    VEps,
    /// `D⁺δ_ε ≤ −(α/ε)(Σ_{I₊} gᵢ + Σ|hⱼ|)`.
    DeltaEps,
    /// `D⁺W ≥ ‖𝒢‖²_Q − α²uᵀg − α²vᵀh`.
    W,
}

impl DiniKind {
    pub const ALL: [DiniKind; 5] = [
        DiniKind::VRelativeC,
        DiniKind::VTilde,
        DiniKind::VEps,
        DiniKind::DeltaEps,
        DiniKind::W,
    ];
}

/// Problem data shared by the trajectory certificates.
#[derive(Debug, Clone)]
pub struct CertificateContext<'a> {
    pub f: &'a OperatorF,
    pub c: &'a ConstraintSet,
    pub x_star: DVector<f64>,
    pub u_star: DVector<f64>,
    pub v_star: DVector<f64>,
    pub mu: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub slack_factor: f64,
}

impl<'a> CertificateContext<'a> {
    /// Uses the operator's declared μ, the solution multipliers and the
    /// default ε.
    pub fn new(
        f: &'a OperatorF,
        c: &'a ConstraintSet,
        x_star: DVector<f64>,
        alpha: f64,
    ) -> Result<Self, QpError> {
        let (u_star, v_star) = solution_multipliers(f, c, &x_star, alpha)?;
        let norm = u_star.iter().chain(v_star.iter()).fold(0.0_f64, |a, b| a.max(b.abs()));
        Ok(Self {
            f,
            c,
            x_star,
            u_star,
            v_star,
            mu: f.monotonicity(),
            alpha,
            epsilon: alpha / (2.0 * (norm + 1.0)),
            slack_factor: DEFAULT_SLACK_FACTOR,
        })
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_slack_factor(mut self, factor: f64) -> Self {
        self.slack_factor = factor;
        self
    }

    fn projections(&self, traj: &Trajectory) -> Result<Vec<ProjectionResult>, QpError> {
        let mut pr = Projector::new(self.c);
        traj.states
            .iter()
            .map(|s| pr.restricted_tangent(&self.f.eval(&s.x), &s.x, self.alpha))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiniReport {
    pub kind: DiniKind,
    pub steps: usize,
    /// Largest amount by which a forward difference exceeds its bound
    /// plus slack (≤ 0 means every step passed).
    pub max_violation: f64,
    pub violations: usize,
    pub first_violation: Option<usize>,
    /// False when the bound needs derivatives the problem does not supply.
    pub evaluated: bool,
    pub per_step: Vec<f64>,
}

impl DiniReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Compares forward differences `(φ(x_{k+1}) − φ(x_k))/h` with the bound of
/// `which` at `x_k`, allowing `slack_factor·h·(1 + ‖𝒢_α(x_k)‖)`.
pub fn dini_bound_check(
    traj: &Trajectory,
    which: DiniKind,
    ctx: &CertificateContext<'_>,
) -> Result<DiniReport, QpError> {
    let projs = ctx.projections(traj)?;
    Ok(dini_with_projections(traj, which, ctx, &projs))
}

fn dini_with_projections(
    traj: &Trajectory,
    which: DiniKind,
    ctx: &CertificateContext<'_>,
    projs: &[ProjectionResult],
) -> DiniReport {
    let (c, alpha, h) = (ctx.c, ctx.alpha, traj.h);
    let a2 = alpha * alpha;
    let g_star = c.g(&ctx.x_star);
    let value = |k: usize| -> f64 {
        let x = &traj.states[k].x;
        let lv = lyapunov_values(c, x, alpha, &projs[k], &ctx.x_star, ctx.epsilon);
        match which {
            DiniKind::VRelativeC => lv.v,
            DiniKind::VTilde => eval_v_tilde(x, &ctx.x_star),
            DiniKind::VEps => lv.v_eps,
            DiniKind::DeltaEps => delta_eps(c, x, ctx.epsilon),
            DiniKind::W => lv.w,
        }
    };
    let steps = traj.len().saturating_sub(1);
    let mut per_step = Vec::with_capacity(steps);
    let mut violations = 0;
    let mut first = None;
    let mut max_violation = f64::NEG_INFINITY;
    let mut evaluated = true;
    let mut prev = if traj.is_empty() { 0.0 } else { value(0) };
    for k in 0..steps {
        let x = &traj.states[k].x;
        let p = &projs[k];
        let next = value(k + 1);
        let diff = (next - prev) / h;
        prev = next;
        let slack = ctx.slack_factor * h * (1.0 + p.xi.norm());
        let dist2 = (x - &ctx.x_star).norm_squared();
        let violation = match which {
            DiniKind::VRelativeC | DiniKind::VEps => diff - (-ctx.mu * dist2 + slack),
            DiniKind::VTilde => {
                let g = c.g(x);
                let du = &p.u - &ctx.u_star;
                let mut bound = -ctx.mu * dist2 - du.dot(&(&g - &g_star));
                if c.k() > 0 {
                    bound -= (&p.v - &ctx.v_star).dot(&c.h(x));
                }
                diff - (bound + slack)
            }
            DiniKind::DeltaEps => {
                let pos: f64 = c.g(x).iter().filter(|&&g| g > 0.0).sum();
                let eq: f64 = c.h(x).iter().map(|v| v.abs()).sum();
                diff - (-(alpha / ctx.epsilon) * (pos + eq) + slack)
            }
            DiniKind::W => match curvature_matrix(ctx.f, c, x, &p.u) {
                Some(q) => {
                    let quad = p.xi.dot(&(&q * &p.xi));
                    let mut bound = quad - a2 * p.u.dot(&c.g(x));
                    if c.k() > 0 {
                        bound -= a2 * p.v.dot(&c.h(x));
                    }
                    (bound - slack) - diff
                }
                None => {
                    evaluated = false;
                    f64::NEG_INFINITY
                }
            },
        };
        if violation > 0.0 {
            violations += 1;
            first.get_or_insert(k);
        }
        max_violation = max_violation.max(violation);
        per_step.push(diff);
    }
    DiniReport {
        kind: which,
        steps,
        max_violation: if steps == 0 { 0.0 } else { max_violation },
        violations,
        first_violation: first,
        evaluated,
        per_step,
    }
}

/// Checks `φ_{k+1} − φ_k ≤ slack_factor·h²·(1 + ‖field_k‖)` along a series
/// of values; returns the largest excess.
pub fn decrease_check(values: &[f64], field_norms: &[f64], h: f64, slack_factor: f64) -> f64 {
    values
        .windows(2)
        .zip(field_norms)
        .map(|(w, &fnorm)| (w[1] - w[0]) - slack_factor * h * h * (1.0 + fnorm))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Least-squares slope of `log‖x_a(t) − x_b(t)‖` from `t = 0` until the
/// distance first drops below [`CONTRACTION_FLOOR`].
pub fn contraction_estimate(a: &Trajectory, b: &Trajectory) -> Result<f64, AnalysisError> {
    let d = a.distances(b).ok_or(AnalysisError::GridMismatch)?;
    if d.is_empty() || d[0] < CONTRACTION_FLOOR {
        return Err(AnalysisError::DegenerateWindow);
    }
    let end = d.iter().position(|&v| v < CONTRACTION_FLOOR).unwrap_or(d.len());
    if end < 2 {
        return Err(AnalysisError::DegenerateWindow);
    }
    let ts: Vec<f64> = a.states[..end].iter().map(|s| s.t).collect();
    let ys: Vec<f64> = d[..end].iter().map(|v| v.ln()).collect();
    Ok(least_squares_slope(&ts, &ys))
}

/// Slope of the least-squares line through `(t_i, y_i)`.
pub fn least_squares_slope(ts: &[f64], ys: &[f64]) -> f64 {
    let n = ts.len() as f64;
    let tm = ts.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (t, y) in ts.iter().zip(ys) {
        num += (t - tm) * (y - ym);
        den += (t - tm) * (t - tm);
    }
    num / den
}

/// The largest `log(d(t)/d(0)) + c·t` along a trajectory pair; the pair
/// contracts at rate `c` when this stays below `log(1 + tol)`.
pub fn contraction_excess(a: &Trajectory, b: &Trajectory, rate: f64) -> Result<f64, AnalysisError> {
    let d = a.distances(b).ok_or(AnalysisError::GridMismatch)?;
    if d.is_empty() || d[0] < CONTRACTION_FLOOR {
        return Err(AnalysisError::DegenerateWindow);
    }
    let d0 = d[0];
    Ok(d.iter()
        .zip(&a.states)
        .take_while(|(v, _)| **v >= CONTRACTION_FLOOR)
        .map(|(v, s)| (v / d0).ln() + rate * s.t)
        .fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimates {
    /// `μ − ℓ_F²/(4α)`.
    pub c_smf: f64,
    /// `ℓ_F²/(4μ)`.
    pub alpha_bound: f64,
    /// `λ_min(Q̃) − λ_max(Q̃)/(4β)`; undefined when `Q̃` is singular.
    pub c_bar: Option<f64>,
    /// `λ_max(Q̃)/(4λ_min(Q̃))`; undefined when `Q̃` is singular.
    pub beta_bound: Option<f64>,
    /// `λ_max(Q̃)/α`.
    pub issf_gain_slope: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl RateEstimates {
    /// True iff `α` exceeds the contraction threshold.
    pub fn contraction_guaranteed(&self) -> bool {
        self.c_smf > 0.0
    }

    /// True iff the inner multiplier dynamics provably contract.
    pub fn inner_contraction_guaranteed(&self) -> bool {
        self.c_bar.is_some_and(|c| c > 0.0)
    }
}

/// Rate constants of the safe and recursive flows.
pub fn rate_formulas(mu: f64, lf: f64, alpha: f64, qtilde: &DMatrix<f64>, beta: f64) -> RateEstimates {
    let (lmin, lmax) = linalg::sym_eig_range(qtilde);
    let singular = lmin <= 1e-12 * lmax.max(1.0);
    let (lmin, c_bar, beta_bound) = if singular {
        (lmin.max(0.0), None, None)
    } else {
        (lmin, Some(lmin - lmax / (4.0 * beta)), Some(lmax / (4.0 * lmin)))
    };
    RateEstimates {
        c_smf: mu - lf * lf / (4.0 * alpha),
        alpha_bound: if mu > 0.0 { lf * lf / (4.0 * mu) } else { f64::INFINITY },
        c_bar,
        beta_bound,
        issf_gain_slope: lmax / alpha,
        lambda_min: lmin,
        lambda_max: lmax,
    }
}

/// ISSf gain `γ(r) = λ_max(Q̃)·r/α`.
pub fn issf_gain(lambda_max: f64, alpha: f64, r: f64) -> f64 {
    lambda_max / alpha * r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PracticalSafety {
    /// `max_t max(maxᵢ gᵢ(x(t)), ‖h(x(t))‖_∞)`.
    pub max_excursion: f64,
    pub safe: bool,
    /// `(λ_max(Q̃)/α)·sup_t ‖(u, v) − κ(x)‖`, when tracking was recorded.
    pub predicted: Option<f64>,
}

/// Checks that a trajectory stays in `C_ε` and reports the ISSf prediction.
pub fn practical_safety_check(traj: &Trajectory, c: &ConstraintSet, epsilon: f64) -> PracticalSafety {
    let max_excursion = traj
        .diagnostics
        .iter()
        .map(|d| d.gmax.max(d.hmax))
        .fold(f64::NEG_INFINITY, f64::max);
    let lambda_max = traj
        .states
        .iter()
        .take(if c.is_polyhedral() { 1 } else { usize::MAX })
        .map(|s| linalg::sym_eig_range(&c.constraint_gram(&s.x)).1)
        .fold(0.0, f64::max);
    let predicted = traj
        .max_tracking_error()
        .map(|e| issf_gain(lambda_max, traj.alpha, e));
    PracticalSafety {
        max_excursion,
        safe: max_excursion <= epsilon,
        predicted,
    }
}

/// Up to `count` feasible points: `x*` itself plus projections onto `C` of
/// Gaussian perturbations of `x*` with standard deviation `radius`.
pub fn sample_feasible_points<R: Rng + ?Sized>(
    c: &ConstraintSet,
    center: &DVector<f64>,
    radius: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>, QpError> {
    let mut pr = Projector::new(c);
    let mut out = Vec::with_capacity(count);
    if count > 0 {
        out.push(center.clone());
    }
    while out.len() < count {
        let noise = DVector::from_iterator(center.len(), (0..center.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        out.push(pr.euclidean(&(center + noise * radius))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WSignReport {
    pub samples: usize,
    pub max_w: f64,
    /// Points with `|W| ≤ tol` farther than `zero_radius` from `x*`.
    pub spurious_zeros: usize,
    pub passed: bool,
}

/// `W ≤ tol` on all samples, with `|W| ≤ tol` only within `zero_radius`
/// of `x*`.
pub fn w_sign_check(
    f: &OperatorF,
    c: &ConstraintSet,
    alpha: f64,
    x_star: &DVector<f64>,
    samples: &[DVector<f64>],
    tol: f64,
    zero_radius: f64,
) -> Result<WSignReport, QpError> {
    let mut pr = Projector::new(c);
    let mut max_w = f64::NEG_INFINITY;
    let mut spurious = 0;
    for x in samples {
        let p = pr.restricted_tangent(&f.eval(x), x, alpha)?;
        let w = eval_w(c, x, alpha, &p);
        max_w = max_w.max(w);
        if w.abs() <= tol && (x - x_star).norm() > zero_radius {
            spurious += 1;
        }
    }
    Ok(WSignReport {
        samples: samples.len(),
        max_w,
        spurious_zeros: spurious,
        passed: max_w <= tol && spurious == 0,
    })
}

/// Per-step certificate values and summary scalars for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub flow: String,
    pub alpha: f64,
    pub epsilon: f64,
    pub t: Vec<f64>,
    pub v_tilde: Vec<f64>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub delta_eps: Vec<f64>,
    pub v_eps: Vec<f64>,
    pub dini: Vec<DiniReport>,
    pub min_w: f64,
    pub max_w_feasible: f64,
    pub max_dini_violation: f64,
    pub contraction_slope: Option<f64>,
    pub violations: Vec<String>,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Evaluates every Lyapunov function and Dini bound along `traj`.
/// `kinds` selects the Dini bounds that count as pass/fail criteria.
pub fn certificate_report(
    traj: &Trajectory,
    ctx: &CertificateContext<'_>,
    kinds: &[DiniKind],
) -> Result<CertificateReport, QpError> {
    let projs = ctx.projections(traj)?;
    let c = ctx.c;
    let mut report = CertificateReport {
        flow: traj.kind.to_string(),
        alpha: ctx.alpha,
        epsilon: ctx.epsilon,
        t: traj.times(),
        v_tilde: Vec::new(),
        w: Vec::new(),
        v: Vec::new(),
        delta_eps: Vec::new(),
        v_eps: Vec::new(),
        dini: Vec::new(),
        min_w: f64::INFINITY,
        max_w_feasible: f64::NEG_INFINITY,
        max_dini_violation: f64::NEG_INFINITY,
        contraction_slope: None,
        violations: Vec::new(),
    };
    for (s, p) in traj.states.iter().zip(&projs) {
        let lv = lyapunov_values(c, &s.x, ctx.alpha, p, &ctx.x_star, ctx.epsilon);
        report.v_tilde.push(eval_v_tilde(&s.x, &ctx.x_star));
        report.w.push(lv.w);
        report.v.push(lv.v);
        report.delta_eps.push(delta_eps(c, &s.x, ctx.epsilon));
        report.v_eps.push(lv.v_eps);
        report.min_w = report.min_w.min(lv.w);
        if c.contains(&s.x, 1e-9) {
            report.max_w_feasible = report.max_w_feasible.max(lv.w);
        }
    }
    for &kind in kinds {
        let d = dini_with_projections(traj, kind, ctx, &projs);
        if d.evaluated {
            report.max_dini_violation = report.max_dini_violation.max(d.max_violation);
            if !d.passed() {
                report.violations.push(format!(
                    "{kind:?} bound violated at {} of {} steps (first at step {}, worst excess {:.3e})",
                    d.violations,
                    d.steps,
                    d.first_violation.unwrap_or(0),
                    d.max_violation
                ));
            }
        }
        report.dini.push(d);
    }
    if report.max_w_feasible > 1e-10 {
        report
            .violations
            .push(format!("W positive on a feasible state ({:.3e})", report.max_w_feasible));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{integrate, FlowKind, FlowParams, FlowState, IntegrateOptions};
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn game() -> (OperatorF, ConstraintSet) {
        let f = OperatorF::affine(dmatrix![1.0, -1.0; 1.0, 1.0], dvector![0.0, 0.5]).unwrap();
        let c = ConstraintSet::boxed(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        (f, c)
    }

    fn proj(f: &OperatorF, c: &ConstraintSet, x: &DVector<f64>) -> ProjectionResult {
        Projector::new(c).restricted_tangent(&f.eval(x), x, 1.0).unwrap()
    }

    #[test]
    fn w_examples() {
        let (f, c) = game();
        for (x, expected) in [
            (dvector![-0.25, -0.25], 0.0),
            (dvector![0.0, 0.0], -0.125),
            (dvector![1.0, 0.0], -1.5),
        ] {
            let p = proj(&f, &c, &x);
            assert_abs_diff_eq!(eval_w(&c, &x, 1.0, &p), expected, epsilon = 1e-12);
            assert_abs_diff_eq!(eval_w_variational(&f, &x, &p), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn v_eps_examples() {
        let (f, c) = game();
        let xs = dvector![-0.25, -0.25];
        assert_abs_diff_eq!(eval_v_eps(&f, &c, &xs, &xs, 1.0, 0.5).unwrap(), 0.0, epsilon = 1e-14);

        let x = dvector![0.5, 0.5];
        let p = proj(&f, &c, &x);
        let expected = eval_v(&c, &x, &xs, 1.0, &p);
        assert_abs_diff_eq!(eval_v_eps(&f, &c, &x, &xs, 1.0, 0.5).unwrap(), expected, epsilon = 1e-14);

        let x = dvector![1.5, 0.0];
        let p = proj(&f, &c, &x);
        let vt = eval_v_tilde(&x, &xs);
        let w = eval_w(&c, &x, 1.0, &p);
        let expected = vt + (-w).max(0.0) + 1.0;
        assert_abs_diff_eq!(delta_eps(&c, &x, 0.5), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(eval_v_eps(&f, &c, &x, &xs, 1.0, 0.5).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn rate_examples() {
        let s2 = 2.0_f64.sqrt();
        let r = rate_formulas(1.0, s2, 1.0, &(DMatrix::identity(2, 2) * 2.0), 1.0);
        assert_abs_diff_eq!(r.c_smf, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.alpha_bound, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.beta_bound.unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(r.c_bar.unwrap(), 1.5, epsilon = 1e-15);

        let (_, c) = game();
        let q = c.constraint_gram(&dvector![0.0, 0.0]);
        let r = rate_formulas(1.0, s2, 1.0, &q, 1.0);
        assert!(r.c_bar.is_none() && r.beta_bound.is_none());
        assert_abs_diff_eq!(r.issf_gain_slope, 2.0, epsilon = 1e-12);
        assert!(!rate_formulas(1.0, s2, 0.4, &q, 1.0).contraction_guaranteed());
    }

    #[test]
    fn issf_gain_is_linear() {
        for r in [0.0, 0.1, 1.7, 42.0] {
            assert_eq!(issf_gain(2.0, 0.7, 2.0 * r), 2.0 * issf_gain(2.0, 0.7, r));
        }
    }

    #[test]
    fn stationary_trajectory_has_zero_differences() {
        let (f, c) = game();
        let xs = dvector![-0.25, -0.25];
        let p = FlowParams { t_final: 0.1, ..FlowParams::default() };
        let tr = integrate(FlowKind::Smf, &f, &c, &FlowState::primal(xs.clone(), &c), &p, &IntegrateOptions::default()).unwrap();
        let ctx = CertificateContext::new(&f, &c, xs, 1.0).unwrap();
        for kind in DiniKind::ALL {
            let d = dini_bound_check(&tr, kind, &ctx).unwrap();
            assert!(d.per_step.iter().all(|v| v.abs() < 1e-12));
            assert!(d.passed());
        }
    }

    #[test]
    fn contraction_degenerate() {
        let (f, c) = game();
        let p = FlowParams { t_final: 0.1, ..FlowParams::default() };
        let x0 = dvector![1.0, 1.0];
        let a = integrate(FlowKind::Smf, &f, &c, &FlowState::primal(x0.clone(), &c), &p, &IntegrateOptions::default()).unwrap();
        assert_eq!(contraction_estimate(&a, &a.clone()), Err(AnalysisError::DegenerateWindow));
    }

    #[test]
    fn least_squares_line() {
        let ts = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = ts.iter().map(|t| 2.0 - 0.5 * t).collect();
        assert_abs_diff_eq!(least_squares_slope(&ts, &ys), -0.5, epsilon = 1e-15);
    }
}
