//! Benchmark problems: a two-player quadratic game, a receding-horizon
//! linear-quadratic dynamic game, and optimization problems posed as VIs.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flows::{integrate, FlowError, FlowKind, FlowParams, FlowState, IntegrateOptions};
use crate::linalg;
use crate::qp::Projector;
use crate::vi::{natural_residual, ConstraintSet, OperatorF, ViError, ViProblem};

/// Natural-residual target of the `t_f = ∞` proxy.
pub const EXACT_RESIDUAL: f64 = 1e-8;
/// Time cap of the `t_f = ∞` proxy.
pub const EXACT_TIME_CAP: f64 = 1e4;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error(transparent)]
    Vi(#[from] ViError),
    #[error("{0} must be {1}")]
    Definiteness(&'static str, &'static str),
    #[error("strong-monotonicity block condition fails (smallest eigenvalue {0:.3e})")]
    MonotonicityViolation(f64),
    #[error("outer step {step}: {source}")]
    Solver { step: usize, source: FlowError },
    #[error("t_f must be positive")]
    InvalidTermination,
}

/// `F(x) = Qx + r` on a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticGame {
    pub q: DMatrix<f64>,
    pub r: DVector<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QuadraticGame {
    pub fn operator(&self) -> Result<OperatorF, ViError> {
        OperatorF::affine(self.q.clone(), self.r.clone())
    }

    pub fn constraints(&self) -> Result<ConstraintSet, ViError> {
        ConstraintSet::boxed(&self.lower, &self.upper)
    }

    /// `λ_min((Q + Qᵀ)/2)`.
    pub fn monotonicity(&self) -> f64 {
        linalg::sym_eig_range(&self.q).0
    }

    pub fn problem(&self, name: &str) -> Result<ViProblem, ViError> {
        ViProblem::new(name, self.operator()?, self.constraints()?)
    }
}

/// The two-player game with `Q = [[1, −1], [1, 1]]`, `r = (0, 0.5)` on
/// `[−1, 1]²`; its solution `(−0.25, −0.25)` is interior.
pub fn two_player_game() -> QuadraticGame {
    QuadraticGame {
        q: dmatrix![1.0, -1.0; 1.0, 1.0],
        r: dvector![0.0, 0.5],
        lower: vec![-1.0, -1.0],
        upper: vec![1.0, 1.0],
    }
}

pub fn build_two_player_game() -> (OperatorF, ConstraintSet) {
    let g = two_player_game();
    (g.operator().expect("valid game"), g.constraints().expect("valid box"))
}

pub fn two_player_game_problem() -> ViProblem {
    two_player_game()
        .problem("two_player_game")
        .expect("valid game")
        .with_solution(dvector![-0.25, -0.25])
}

/// A rotation with negative gain, `F(x) = [[−0.5, −1], [1, −0.5]]x` on
/// `[−1, 1]²`. The origin solves the VI but the operator is not monotone.
pub fn nonmonotone_rotation_problem() -> ViProblem {
    let f = OperatorF::affine(dmatrix![-0.5, -1.0; 1.0, -0.5], dvector![0.0, 0.0]).expect("square");
    let c = ConstraintSet::boxed(&[-1.0, -1.0], &[1.0, 1.0]).expect("valid box");
    ViProblem::new("nonmonotone_rotation", f, c)
        .expect("consistent")
        .with_solution(dvector![0.0, 0.0])
}

/// `F(x) = x − (1, 2)` with the equality `x₁ + x₂ = 0`; solution
/// `(−0.5, 0.5)`.
pub fn equality_line_problem() -> ViProblem {
    let f = OperatorF::affine(DMatrix::identity(2, 2), dvector![-1.0, -2.0]).expect("square");
    let c = ConstraintSet::polyhedral(
        DMatrix::zeros(0, 2),
        DVector::zeros(0),
        dmatrix![1.0, 1.0],
        dvector![0.0],
    )
    .expect("consistent");
    ViProblem::new("equality_line", f, c)
        .expect("consistent")
        .with_solution(dvector![-0.5, 0.5])
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 4] = ["two_player_game", "nonmonotone_rotation", "equality_line", "lqdg"];

pub fn builtin(name: &str) -> Option<ViProblem> {
    match name {
        "two_player_game" => Some(two_player_game_problem()),
        "nonmonotone_rotation" => Some(nonmonotone_rotation_problem()),
        "equality_line" => Some(equality_line_problem()),
        "lqdg" => {
            let p = LqdgProblem::canonical(CANONICAL_SEED).ok()?;
            let z0 = p.canonical_z0();
            Some(ViProblem::new("lqdg", p.operator(&z0), p.constraints()).ok()?)
        }
        _ => None,
    }
}

/// Wraps a gradient map `∇f` as the operator of `VI(∇f, C)`.
pub fn build_constrained_opt(gradient: OperatorF, c: ConstraintSet) -> Result<(OperatorF, ConstraintSet), ViError> {
    crate::vi::check_dim("gradient dimension", c.n(), gradient.dim())?;
    Ok((gradient, c))
}

/// Gradient `x ↦ Px + q` of `½xᵀPx + qᵀx`.
pub fn quadratic_gradient(p: DMatrix<f64>, q: DVector<f64>) -> Result<OperatorF, ViError> {
    OperatorF::affine(p, q)
}

/// Random dense `n × n` matrix with standard-normal entries, rescaled to
/// spectral radius one. Deterministic per seed.
pub fn marginally_stable_matrix(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let rho = linalg::spectral_radius(&m);
    m / rho
}

/// Seed of the canonical dynamic game instance.
pub const CANONICAL_SEED: u64 = 42;

/// Linear-quadratic dynamic game over `z(s+1) = Az(s) + B₁w₁(s) + B₂w₂(s)`
/// with nonnegative inputs; player 1 minimizes, player 2 maximizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqdgProblem {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub r1: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub horizon: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Stacked prediction `z̄ = 𝒜z₀ + C₁w̄₁ + C₂w̄₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub script_a: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub c2: DMatrix<f64>,
}

impl LqdgProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b1: DMatrix<f64>,
        b2: DMatrix<f64>,
        q: DMatrix<f64>,
        qf: DMatrix<f64>,
        r1: DMatrix<f64>,
        r2: DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self, ProblemError> {
        let p = Self {
            a,
            b1,
            b2,
            q,
            qf,
            r1,
            r2,
            horizon,
            seed: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn nz(&self) -> usize {
        self.a.nrows()
    }

    pub fn nw(&self) -> usize {
        self.b1.ncols()
    }

    /// Number of VI variables, `2·N·n_w`.
    pub fn dim(&self) -> usize {
        2 * self.horizon * self.nw()
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        use crate::vi::check_dim;
        let (nz, nw) = (self.nz(), self.nw());
        check_dim("A cols", nz, self.a.ncols())?;
        check_dim("B1 rows", nz, self.b1.nrows())?;
        check_dim("B2 rows", nz, self.b2.nrows())?;
        check_dim("B2 cols", nw, self.b2.ncols())?;
        for (name, m, size) in [
            ("Q", &self.q, nz),
            ("Qf", &self.qf, nz),
            ("R1", &self.r1, nw),
            ("R2", &self.r2, nw),
        ] {
            check_dim(name, size, m.nrows())?;
            check_dim(name, size, m.ncols())?;
            if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                return Err(ProblemError::Definiteness(name, "symmetric"));
            }
        }
        if self.horizon == 0 {
            return Err(ViError::DimensionMismatch {
                context: "horizon",
                expected: 1,
                found: 0,
            }
            .into());
        }
        if linalg::sym_eig_range(&self.q).0 < -1e-12 || linalg::sym_eig_range(&self.qf).0 < -1e-12 {
            return Err(ProblemError::Definiteness("Q and Qf", "positive semidefinite"));
        }
        if linalg::sym_eig_range(&self.r1).0 <= 0.0 || linalg::sym_eig_range(&self.r2).0 <= 0.0 {
            return Err(ProblemError::Definiteness("R1 and R2", "positive definite"));
        }
        let mu = self.monotonicity_margin();
        if mu <= 0.0 {
            return Err(ProblemError::MonotonicityViolation(mu));
        }
        Ok(())
    }

    pub fn prediction(&self) -> Prediction {
        let (nz, nw, n) = (self.nz(), self.nw(), self.horizon);
        let mut powers = vec![DMatrix::identity(nz, nz)];
        for s in 1..=n {
            powers.push(&self.a * &powers[s - 1]);
        }
        let mut script_a = DMatrix::zeros(n * nz, nz);
        let mut c1 = DMatrix::zeros(n * nz, n * nw);
        let mut c2 = DMatrix::zeros(n * nz, n * nw);
        for s in 0..n {
            script_a.view_mut((s * nz, 0), (nz, nz)).copy_from(&powers[s + 1]);
            for j in 0..=s {
                c1.view_mut((s * nz, j * nw), (nz, nw))
                    .copy_from(&(&powers[s - j] * &self.b1));
                c2.view_mut((s * nz, j * nw), (nz, nw))
                    .copy_from(&(&powers[s - j] * &self.b2));
            }
        }
        Prediction { script_a, c1, c2 }
    }

    /// `Q̄ = diag(Q, …, Q, Q_f)`.
    pub fn q_bar(&self) -> DMatrix<f64> {
        let nz = self.nz();
        let n = self.horizon;
        let mut m = DMatrix::zeros(n * nz, n * nz);
        for s in 0..n {
            let block = if s + 1 == n { &self.qf } else { &self.q };
            m.view_mut((s * nz, s * nz), (nz, nz)).copy_from(block);
        }
        m
    }

    /// `R̄ = diag(R, …, R)`.
    pub fn r_bar(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let nw = self.nw();
        let n = self.horizon;
        let mut m = DMatrix::zeros(n * nw, n * nw);
        for s in 0..n {
            m.view_mut((s * nw, s * nw), (nw, nw)).copy_from(r);
        }
        m
    }

    /// Linear part of the game operator (player 2's rows negated).
    pub fn operator_matrix(&self) -> DMatrix<f64> {
        let p = self.prediction();
        let qb = self.q_bar();
        let d = self.horizon * self.nw();
        let mut m = DMatrix::zeros(2 * d, 2 * d);
        let c1q = p.c1.transpose() * &qb;
        let c2q = p.c2.transpose() * &qb;
        m.view_mut((0, 0), (d, d)).copy_from(&(&c1q * &p.c1 + self.r_bar(&self.r1)));
        m.view_mut((0, d), (d, d)).copy_from(&(&c1q * &p.c2));
        m.view_mut((d, 0), (d, d)).copy_from(&(-(&c2q * &p.c1)));
        m.view_mut((d, d), (d, d)).copy_from(&(self.r_bar(&self.r2) - &c2q * &p.c2));
        m
    }

    pub fn offset(&self, z0: &DVector<f64>) -> DVector<f64> {
        let p = self.prediction();
        let qb = self.q_bar();
        let az = &p.script_a * z0;
        let d = self.horizon * self.nw();
        let mut r = DVector::zeros(2 * d);
        r.rows_mut(0, d).copy_from(&(p.c1.transpose() * &qb * &az));
        r.rows_mut(d, d).copy_from(&(-(p.c2.transpose() * &qb * &az)));
        r
    }

    /// Smallest eigenvalue of `blkdiag(C₁ᵀQ̄C₁ + R̄₁, R̄₂ − C₂ᵀQ̄C₂)`.
    pub fn monotonicity_margin(&self) -> f64 {
        linalg::sym_eig_range(&self.operator_matrix()).0
    }

    pub fn operator(&self, z0: &DVector<f64>) -> OperatorF {
        OperatorF::affine(self.operator_matrix(), self.offset(z0)).expect("square operator")
    }

    /// Nonnegative inputs at every stage.
    pub fn constraints(&self) -> ConstraintSet {
        ConstraintSet::orthant(self.dim())
    }

    /// Splits `x = (w̄₁, w̄₂)` into per-stage inputs.
    pub fn split_inputs(&self, x: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let (nw, n) = (self.nw(), self.horizon);
        let stage = |offset: usize| -> Vec<DVector<f64>> {
            (0..n).map(|s| x.rows(offset + s * nw, nw).into_owned()).collect()
        };
        (stage(0), stage(n * nw))
    }

    /// States `z(0), …, z(N)` by direct recursion.
    pub fn simulate(&self, z0: &DVector<f64>, w1: &[DVector<f64>], w2: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut zs = vec![z0.clone()];
        for s in 0..self.horizon {
            let next = &self.a * &zs[s] + &self.b1 * &w1[s] + &self.b2 * &w2[s];
            zs.push(next);
        }
        zs
    }

    /// Payoff `‖z(N)‖²_{Q_f} + Σ_{s<N} ‖z(s)‖²_Q + ‖w₁(s)‖²_{R₁} − ‖w₂(s)‖²_{R₂}`
    /// by simulation.
    pub fn payoff(&self, z0: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let (w1, w2) = self.split_inputs(x);
        let zs = self.simulate(z0, &w1, &w2);
        let quad = |m: &DMatrix<f64>, v: &DVector<f64>| v.dot(&(m * v));
        let mut j = quad(&self.qf, &zs[self.horizon]);
        for s in 0..self.horizon {
            j += quad(&self.q, &zs[s]) + quad(&self.r1, &w1[s]) - quad(&self.r2, &w2[s]);
        }
        j
    }

    /// Stacked quadratic form of the payoff. It omits the stage-zero cost
    /// `z₀ᵀQz₀`, which does not depend on the inputs.
    pub fn stacked_payoff(&self, z0: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let p = self.prediction();
        let qb = self.q_bar();
        let d = self.horizon * self.nw();
        let mut h = DMatrix::zeros(2 * d, 2 * d);
        let c1q = p.c1.transpose() * &qb;
        let c2q = p.c2.transpose() * &qb;
        h.view_mut((0, 0), (d, d)).copy_from(&(&c1q * &p.c1 + self.r_bar(&self.r1)));
        h.view_mut((0, d), (d, d)).copy_from(&(&c1q * &p.c2));
        h.view_mut((d, 0), (d, d)).copy_from(&(&c2q * &p.c1));
        h.view_mut((d, d), (d, d)).copy_from(&(&c2q * &p.c2 - self.r_bar(&self.r2)));
        let az = &p.script_a * z0;
        let mut lin = DVector::zeros(2 * d);
        lin.rows_mut(0, d).copy_from(&(&c1q * &az));
        lin.rows_mut(d, d).copy_from(&(&c2q * &az));
        x.dot(&(&h * x)) + 2.0 * lin.dot(x) + az.dot(&(&qb * &az))
    }

    /// The canonical instance: `n_z = 5`, `n_w = 2`, `B_i = [I; 0]`,
    /// horizon 5, `Q = Q_f = I`, `R₁ = I`, `R₂ = 10I` (doubled until the
    /// monotonicity condition holds) and a random marginally stable `A`.
    pub fn canonical(seed: u64) -> Result<Self, ProblemError> {
        Self::canonical_with_horizon(seed, 5)
    }

    pub fn canonical_with_horizon(seed: u64, horizon: usize) -> Result<Self, ProblemError> {
        let (nz, nw) = (5, 2);
        let a = marginally_stable_matrix(nz, seed);
        let mut b = DMatrix::zeros(nz, nw);
        for i in 0..nw {
            b[(i, i)] = 1.0;
        }
        let mut r2_scale = 10.0;
        loop {
            let candidate = Self {
                a: a.clone(),
                b1: b.clone(),
                b2: b.clone(),
                q: DMatrix::identity(nz, nz),
                qf: DMatrix::identity(nz, nz),
                r1: DMatrix::identity(nw, nw),
                r2: DMatrix::identity(nw, nw) * r2_scale,
                horizon,
                seed: Some(seed),
            };
            match candidate.validate() {
                Ok(()) => return Ok(candidate),
                Err(ProblemError::MonotonicityViolation(_)) if r2_scale < 1e12 => r2_scale *= 2.0,
                Err(e) => return Err(e),
            }
        }
    }

    /// Initial plant state used by the experiments: all ones.
    pub fn canonical_z0(&self) -> DVector<f64> {
        DVector::from_element(self.nz(), 1.0)
    }
}

/// When each receding-horizon solve stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Termination {
    /// Integrate for a fixed time.
    Time(f64),
    /// Integrate until the natural residual reaches [`EXACT_RESIDUAL`].
    Exact,
}

impl Termination {
    pub fn label(&self) -> String {
        match self {
            Termination::Time(t) => format!("{t}"),
            Termination::Exact => "inf".to_string(),
        }
    }
}

impl std::str::FromStr for Termination {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(Termination::Exact);
        }
        let t: f64 = s.parse().map_err(|_| format!("invalid t_f '{s}'"))?;
        if t.is_finite() && t > 0.0 {
            Ok(Termination::Time(t))
        } else {
            Err(format!("t_f must be positive, got {s}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecedingHorizonRun {
    pub termination: Termination,
    pub flow: FlowKind,
    /// Plant states `z(0), …, z(steps)`.
    pub z: Vec<DVector<f64>>,
    /// Applied first-stage inputs per outer step.
    pub w1: Vec<DVector<f64>>,
    pub w2: Vec<DVector<f64>>,
    /// Integration time used by each solve.
    pub solve_time: Vec<f64>,
}

impl RecedingHorizonRun {
    pub fn znorm(&self) -> Vec<f64> {
        self.z.iter().map(|z| z.norm()).collect()
    }

    /// Smallest applied input component.
    pub fn min_input(&self) -> f64 {
        self.w1
            .iter()
            .chain(&self.w2)
            .flat_map(|w| w.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Step size for receding-horizon solves: `min(0.01, 1/ℓ_F)`.
pub fn receding_step_size(f: &OperatorF) -> f64 {
    let lf = f.lipschitz().unwrap_or(1.0).max(1e-12);
    (1.0 / lf).min(0.01)
}

/// Receding-horizon loop: solve the game from the current state with
/// `flow`, apply the first-stage inputs, advance the plant, and warm start
/// the next solve from the shifted previous solution.
pub fn receding_horizon_run(
    problem: &LqdgProblem,
    z0: &DVector<f64>,
    flow: FlowKind,
    termination: Termination,
    steps: usize,
    base: &FlowParams,
) -> Result<RecedingHorizonRun, ProblemError> {
    if let Termination::Time(t) = termination {
        if !(t > 0.0 && t.is_finite()) {
            return Err(ProblemError::InvalidTermination);
        }
    }
    crate::vi::check_dim("initial plant state", problem.nz(), z0.len())?;
    let c = problem.constraints();
    let (nw, n) = (problem.nw(), problem.horizon);
    let d = n * nw;
    let mut run = RecedingHorizonRun {
        termination,
        flow,
        z: vec![z0.clone()],
        w1: Vec::new(),
        w2: Vec::new(),
        solve_time: Vec::new(),
    };
    let mut x = DVector::zeros(2 * d);
    for step in 0..steps {
        let z = run.z[step].clone();
        let f = problem.operator(&z);
        let h = receding_step_size(&f);
        let mut params = FlowParams {
            h,
            tau: base.tau.max(10.0 * h),
            ..*base
        };
        let fail = |source| ProblemError::Solver { step, source };
        let mut state = FlowState::primal(x.clone(), &c);
        let elapsed = match termination {
            Termination::Time(t) => {
                params.t_final = t.max(h);
                let tr = integrate(flow, &f, &c, &state, &params, &IntegrateOptions::default()).map_err(fail)?;
                state = tr.last().clone();
                tr.last().t
            }
            Termination::Exact => {
                params.t_final = 1.0;
                let mut pr = Projector::new(&c);
                let mut elapsed = 0.0;
                loop {
                    let res = natural_residual(&f, &state.x, |y| {
                        pr.euclidean(y).map_err(|e| ViError::Projection(e.to_string()))
                    })?;
                    if res <= EXACT_RESIDUAL || elapsed >= EXACT_TIME_CAP {
                        break;
                    }
                    let tr = integrate(flow, &f, &c, &state, &params, &IntegrateOptions::default())
                        .map_err(fail)?;
                    elapsed += tr.last().t;
                    state = FlowState::new(tr.last().x.clone(), tr.last().u.clone(), tr.last().v.clone(), 0.0);
                }
                elapsed
            }
        };
        x = state.x;
        let (w1, w2) = problem.split_inputs(&x);
        let next = &problem.a * &z + &problem.b1 * &w1[0] + &problem.b2 * &w2[0];
        run.w1.push(w1[0].clone());
        run.w2.push(w2[0].clone());
        run.solve_time.push(elapsed);
        run.z.push(next);
        x = shift_inputs(&x, nw, n);
    }
    Ok(run)
}

/// Drops each player's first stage and appends a zero stage.
pub fn shift_inputs(x: &DVector<f64>, nw: usize, horizon: usize) -> DVector<f64> {
    let d = nw * horizon;
    let mut out = DVector::zeros(2 * d);
    for p in 0..2 {
        let base = p * d;
        for i in 0..d - nw {
            out[base + i] = x[base + nw + i];
        }
    }
    out
}
