//! The four subcommands. Each returns a summary for standard output and
//! the process exit code.

use std::fs;
use std::path::{Path, PathBuf};

use monoflow::analysis::{
    certificate_report, contraction_estimate, decrease_check, rate_formulas, sample_feasible_points,
    solution_multipliers, w_sign_check, CertificateContext, CertificateReport, DiniKind, DiniReport, WSignReport,
};
use monoflow::flows::{integrate, FlowError, IntegrateOptions, LyapunovSpec};
use monoflow::io::{write_receding_csv, write_trajectory_csv, IoError, ProblemFile};
use monoflow::problems::{builtin, receding_horizon_run, LqdgProblem, ProblemError, BUILTIN_NAMES, CANONICAL_SEED};
use monoflow::qp::Projector;
use monoflow::vi::{kkt_residual, natural_residual};
use monoflow::{
    ConstraintSet, FlowKind, FlowParams, FlowState, KktTriple, OperatorF, Trajectory, ViError, ViProblem,
};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, DEFAULT_HORIZON, DEFAULT_STEPS};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NONCONVERGED: u8 = 2;
pub const EXIT_DOMAIN: u8 = 3;
pub const EXIT_CERTIFICATE: u8 = 4;

/// Feasibility tolerance for start classification and initial checks.
const FEASIBLE_TOL: f64 = 1e-9;
/// Time budget for computing an unknown solution.
const SOLUTION_T_FINAL: f64 = 200.0;
/// Tolerated relative shortfall of a measured contraction slope.
const SLOPE_SLACK: f64 = 0.1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("problem file: {0}")]
    Problem(#[from] IoError),
    #[error("{0}")]
    Domain(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Domain(_) => EXIT_DOMAIN,
            _ => EXIT_CONFIG,
        }
    }

    fn config(field: &'static str, message: impl Into<String>) -> Self {
        CliError::Config(ConfigError::Field {
            field,
            message: message.into(),
        })
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::InvalidParams(m) => CliError::config("params", m),
            FlowError::Dimension(v) => CliError::config("x0", v.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<ProblemError> for CliError {
    fn from(e: ProblemError) -> Self {
        match e {
            ProblemError::Solver { .. } => CliError::Domain(e.to_string()),
            other => CliError::config("problem", other.to_string()),
        }
    }
}

impl From<ViError> for CliError {
    fn from(e: ViError) -> Self {
        CliError::Domain(e.to_string())
    }
}

/// What a subcommand prints and how the process exits.
#[derive(Debug)]
pub struct Report {
    pub summary: String,
    pub code: u8,
    pub files: Vec<PathBuf>,
}

fn load_problem(cfg: &RunConfig) -> Result<ViProblem, CliError> {
    let source = cfg.problem.as_deref().unwrap_or("two_player_game");
    if source == "lqdg" {
        let p = LqdgProblem::canonical_with_horizon(cfg.seed.unwrap_or(CANONICAL_SEED), cfg.horizon.unwrap_or(DEFAULT_HORIZON))?;
        let z0 = p.canonical_z0();
        return Ok(ViProblem::new("lqdg", p.operator(&z0), p.constraints())?);
    }
    if let Some(p) = builtin(source) {
        return Ok(p);
    }
    let path = Path::new(source);
    if !path.exists() {
        return Err(CliError::config(
            "problem",
            format!("`{source}` is neither a built-in ({}) nor a file", BUILTIN_NAMES.join(", ")),
        ));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::config("problem", format!("{}: {e}", path.display())))?;
    Ok(ProblemFile::parse(&text)?.to_problem()?)
}

fn starts(cfg: &RunConfig, n: usize) -> Result<Vec<DVector<f64>>, CliError> {
    if cfg.x0.is_empty() {
        return Ok(vec![DVector::from_element(n, 1.0)]);
    }
    cfg.x0
        .iter()
        .map(|x| {
            if x.len() == n {
                Ok(DVector::from_column_slice(x))
            } else {
                Err(CliError::config("x0", format!("expected {n} entries, found {}", x.len())))
            }
        })
        .collect()
}

fn initial_state(cfg: &RunConfig, c: &ConstraintSet, x0: &DVector<f64>) -> Result<FlowState, CliError> {
    let mut s = FlowState::primal(x0.clone(), c);
    if let Some(u0) = &cfg.u0 {
        if u0.len() != c.m() {
            return Err(CliError::config("u0", format!("expected {} entries, found {}", c.m(), u0.len())));
        }
        if u0.iter().any(|&u| u < 0.0) {
            return Err(CliError::config("u0", "multipliers must be nonnegative"));
        }
        s.u = DVector::from_column_slice(u0);
    }
    Ok(s)
}

fn write_file(path: PathBuf, bytes: &[u8], files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(&path, bytes).map_err(|source| CliError::Write {
        path: path.clone(),
        source,
    })?;
    files.push(path);
    Ok(())
}

fn csv_bytes(traj: &Trajectory) -> Vec<u8> {
    let mut out = Vec::new();
    write_trajectory_csv(traj, &mut out).expect("writing to memory");
    out
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

fn fmt_vec(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("({})", parts.join(", "))
}

fn residual(f: &OperatorF, c: &ConstraintSet, x: &DVector<f64>) -> Result<f64, CliError> {
    let mut pr = Projector::new(c);
    Ok(natural_residual(f, x, |y| {
        pr.euclidean(y).map_err(|e| ViError::Projection(e.to_string()))
    })?)
}

fn dini_kinds(kind: FlowKind, feasible: bool) -> &'static [DiniKind] {
    match (kind, feasible) {
        (FlowKind::Smf, true) => &DiniKind::ALL,
        (FlowKind::Smf, false) => &[DiniKind::VTilde, DiniKind::VEps, DiniKind::DeltaEps, DiniKind::W],
        _ => &[],
    }
}

fn check_pmf_start(kind: FlowKind, c: &ConstraintSet, x0: &DVector<f64>) -> Result<(), CliError> {
    let v = c.violation(x0);
    if kind == FlowKind::Pmf && v > FEASIBLE_TOL {
        return Err(CliError::Domain(format!(
            "the projected flow needs a feasible start; x0 = {} violates the constraints by {v:.3e}",
            fmt_vec(x0)
        )));
    }
    Ok(())
}

fn run_flow(
    kind: FlowKind,
    problem: &ViProblem,
    state: &FlowState,
    params: &FlowParams,
    stop_on_converge: bool,
) -> Result<Trajectory, CliError> {
    let opts = IntegrateOptions {
        lyapunov: problem.solution.clone().map(LyapunovSpec::new),
        track_feedback: kind == FlowKind::Rsmf,
        stop_on_converge,
    };
    Ok(integrate(kind, &problem.operator, &problem.constraints, state, params, &opts)?)
}

pub fn solve(cfg: &RunConfig) -> Result<Report, CliError> {
    let problem = load_problem(cfg)?;
    let params = cfg.params()?;
    let flows = cfg.flows();
    if flows.len() != 1 {
        return Err(CliError::config("flow", "solve runs exactly one flow"));
    }
    let kind = flows[0];
    let x0 = starts(cfg, problem.dim())?.remove(0);
    check_pmf_start(kind, &problem.constraints, &x0)?;
    let state = initial_state(cfg, &problem.constraints, &x0)?;
    let traj = run_flow(kind, &problem, &state, &params, true)?;
    let (f, c) = (&problem.operator, &problem.constraints);
    let last = traj.last();
    let (u, v) = match kind {
        FlowKind::Rsmf => (last.u.clone(), last.v.clone()),
        _ => solution_multipliers(f, c, &last.x, params.alpha).map_err(|e| CliError::Domain(e.to_string()))?,
    };
    let kkt = kkt_residual(f, c, &KktTriple::new(last.x.clone(), u, v))?;
    let nat = residual(f, c, &last.x)?;

    let digest = cfg.digest("solve");
    let out = cfg.out_dir();
    let mut files = Vec::new();
    if cfg.write_trajectory.unwrap_or(true) {
        write_file(out.join(format!("solve-{digest}.csv")), &csv_bytes(&traj), &mut files)?;
    }
    let x_star = problem.solution.clone().unwrap_or_else(|| last.x.clone());
    let feasible = c.contains(&x0, FEASIBLE_TOL);
    let certificate: Option<CertificateReport> = match CertificateContext::new(f, c, x_star, params.alpha) {
        Ok(ctx) => Some(certificate_report(&traj, &ctx, dini_kinds(kind, feasible)).map_err(|e| CliError::Domain(e.to_string()))?),
        Err(_) => None,
    };
    if cfg.write_certificate.unwrap_or(true) {
        let doc = json!({
            "problem": problem.name,
            "flow": kind,
            "params": params,
            "x0": x0.as_slice(),
            "converged_at": traj.converged_at,
            "final_x": last.x.as_slice(),
            "natural_residual": nat,
            "kkt_residual": kkt,
            "max_tracking_error": traj.max_tracking_error(),
            "warnings": traj.warnings,
            "certificate": certificate,
        });
        write_file(out.join(format!("solve-{digest}.json")), &json_bytes(&doc), &mut files)?;
    }

    let mut summary = format!(
        "problem {} | flow {kind} | t = {:.4} | x = {} | natural residual {nat:.3e} | KKT residual {kkt:.3e}\n",
        problem.name,
        last.t,
        fmt_vec(&last.x)
    );
    match traj.converged_at {
        Some(t) => summary.push_str(&format!("converged at t = {t:.4}\n")),
        None => summary.push_str(&format!("not converged by t = {}\n", params.t_final)),
    }
    if let Some(e) = traj.max_tracking_error() {
        summary.push_str(&format!("sup tracking error {e:.3e}\n"));
    }
    for w in &traj.warnings {
        summary.push_str(&format!("warning: {w}\n"));
    }
    let code = if traj.converged() { EXIT_OK } else { EXIT_NONCONVERGED };
    Ok(Report { summary, code, files })
}

#[derive(Debug, Serialize)]
struct RunSummary {
    flow: FlowKind,
    x0: Vec<f64>,
    final_x: Vec<f64>,
    converged_at: Option<f64>,
    max_tracking_error: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PairSummary {
    a: usize,
    b: usize,
    max_distance: f64,
    final_distance: f64,
    contraction_slope: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TrackingSummary {
    start: Vec<f64>,
    /// `sup_t ‖x_rsmf(t) − x_smf(t)‖`.
    sup_distance_to_smf: f64,
    /// `sup_t ‖(u, v) − κ(x)‖` along the recursive flow.
    sup_feedback_error: Option<f64>,
}

pub fn compare(cfg: &RunConfig) -> Result<Report, CliError> {
    let problem = load_problem(cfg)?;
    let params = cfg.params()?;
    let flows = cfg.flows();
    let xs = starts(cfg, problem.dim())?;
    if flows.len() * xs.len() < 2 {
        return Err(CliError::config("flow", "compare needs at least two runs (several flows or several starts)"));
    }
    let mut trajs = Vec::new();
    for x0 in &xs {
        for &kind in &flows {
            check_pmf_start(kind, &problem.constraints, x0)?;
            let state = initial_state(cfg, &problem.constraints, x0)?;
            trajs.push((kind, x0.clone(), run_flow(kind, &problem, &state, &params, false)?));
        }
    }
    let mut pairs = Vec::new();
    for i in 0..trajs.len() {
        for j in i + 1..trajs.len() {
            let d = trajs[i].2.distances(&trajs[j].2).ok_or_else(|| {
                CliError::config("params", format!("runs {i} and {j} are on different time grids"))
            })?;
            pairs.push(PairSummary {
                a: i,
                b: j,
                max_distance: d.iter().copied().fold(0.0, f64::max),
                final_distance: *d.last().unwrap(),
                contraction_slope: contraction_estimate(&trajs[i].2, &trajs[j].2).ok(),
            });
        }
    }
    let mut tracking = Vec::new();
    for x0 in &xs {
        let find = |k: FlowKind| trajs.iter().find(|(kind, s, _)| *kind == k && s == x0).map(|t| &t.2);
        if let (Some(r), Some(s)) = (find(FlowKind::Rsmf), find(FlowKind::Smf)) {
            let d = r.distances(s).expect("shared grid checked above");
            tracking.push(TrackingSummary {
                start: x0.iter().copied().collect(),
                sup_distance_to_smf: d.iter().copied().fold(0.0, f64::max),
                sup_feedback_error: r.max_tracking_error(),
            });
        }
    }
    let runs: Vec<RunSummary> = trajs
        .iter()
        .map(|(kind, x0, t)| RunSummary {
            flow: *kind,
            x0: x0.iter().copied().collect(),
            final_x: t.last().x.iter().copied().collect(),
            converged_at: t.converged_at,
            max_tracking_error: t.max_tracking_error(),
        })
        .collect();

    let digest = cfg.digest("compare");
    let out = cfg.out_dir();
    let mut files = Vec::new();
    if cfg.write_trajectory.unwrap_or(true) {
        for (i, (kind, _, t)) in trajs.iter().enumerate() {
            write_file(out.join(format!("compare-{digest}-{i}-{kind}.csv")), &csv_bytes(t), &mut files)?;
        }
    }
    let doc = json!({
        "problem": problem.name,
        "params": params,
        "runs": runs,
        "pairs": pairs,
        "tracking": tracking,
    });
    write_file(out.join(format!("compare-{digest}.json")), &json_bytes(&doc), &mut files)?;

    let mut summary = String::new();
    for (i, r) in runs.iter().enumerate() {
        summary.push_str(&format!(
            "run {i}: {} from {:?} -> {:?}{}\n",
            r.flow,
            r.x0,
            r.final_x,
            if r.converged_at.is_some() { " (converged)" } else { "" }
        ));
    }
    for p in &pairs {
        let slope = p.contraction_slope.map_or("n/a".to_string(), |s| format!("{s:.4}"));
        summary.push_str(&format!(
            "runs {} vs {}: max distance {:.3e}, final distance {:.3e}, contraction slope {slope}\n",
            p.a, p.b, p.max_distance, p.final_distance
        ));
    }
    for t in &tracking {
        summary.push_str(&format!(
            "rsmf vs smf from {:?}: sup ‖x_rsmf − x_smf‖ {:.3e}, sup feedback tracking error {}\n",
            t.start,
            t.sup_distance_to_smf,
            t.sup_feedback_error.map_or("n/a".to_string(), |e| format!("{e:.3e}"))
        ));
    }
    let code = if trajs.iter().all(|t| t.2.converged()) { EXIT_OK } else { EXIT_NONCONVERGED };
    Ok(Report { summary, code, files })
}

#[derive(Debug, Serialize)]
struct LqdgSummary {
    t_f: String,
    terminal_znorm: f64,
    min_input: f64,
    total_solve_time: f64,
}

pub fn lqdg(cfg: &RunConfig) -> Result<Report, CliError> {
    let seed = cfg.seed.unwrap_or(CANONICAL_SEED);
    let horizon = cfg.horizon.unwrap_or(DEFAULT_HORIZON);
    let steps = cfg.steps.unwrap_or(DEFAULT_STEPS);
    let problem = LqdgProblem::canonical_with_horizon(seed, horizon)?;
    let params = cfg.params()?;
    let flows = cfg.flows();
    if flows.len() != 1 {
        return Err(CliError::config("flow", "lqdg runs exactly one flow"));
    }
    let z0 = match cfg.x0.first() {
        Some(z) if z.len() == problem.nz() => DVector::from_column_slice(z),
        Some(z) => {
            return Err(CliError::config("x0", format!("plant state needs {} entries, found {}", problem.nz(), z.len())))
        }
        None => problem.canonical_z0(),
    };
    let mut csv = Vec::new();
    let mut rows = Vec::new();
    for (i, t) in cfg.terminations()?.into_iter().enumerate() {
        let run = receding_horizon_run(&problem, &z0, flows[0], t, steps, &params)?;
        let mut part = Vec::new();
        write_receding_csv(&run, &mut part).expect("writing to memory");
        let skip = if i == 0 { 0 } else { part.iter().position(|&b| b == b'\n').map_or(0, |p| p + 1) };
        csv.extend_from_slice(&part[skip..]);
        rows.push(LqdgSummary {
            t_f: t.label(),
            terminal_znorm: *run.znorm().last().unwrap(),
            min_input: run.min_input(),
            total_solve_time: run.solve_time.iter().sum(),
        });
    }
    let ordered = rows.windows(2).all(|w| w[1].terminal_znorm <= w[0].terminal_znorm);
    let min_input = rows.iter().map(|r| r.min_input).fold(f64::INFINITY, f64::min);

    let digest = cfg.digest("lqdg");
    let out = cfg.out_dir();
    let mut files = Vec::new();
    write_file(out.join(format!("lqdg-{digest}.csv")), &csv, &mut files)?;
    let doc = json!({
        "seed": seed,
        "horizon": horizon,
        "steps": steps,
        "flow": flows[0],
        "z0": z0.as_slice(),
        "r2_scale": problem.r2[(0, 0)],
        "runs": rows,
        "terminal_norm_nonincreasing": ordered,
        "min_input": min_input,
    });
    write_file(out.join(format!("lqdg-{digest}.json")), &json_bytes(&doc), &mut files)?;

    let mut summary = format!(
        "dynamic game: seed {seed}, horizon {horizon}, {steps} outer steps, flow {}, ‖z(0)‖ = {:.4}\n",
        flows[0],
        z0.norm()
    );
    for r in &rows {
        summary.push_str(&format!(
            "t_f = {:>5}: ‖z({steps})‖ = {:.4e}, min input {:.3e}\n",
            r.t_f, r.terminal_znorm, r.min_input
        ));
    }
    summary.push_str(&format!(
        "min applied input {min_input:.3e}; terminal norm nonincreasing in t_f: {ordered}\n"
    ));
    Ok(Report {
        summary,
        code: EXIT_OK,
        files,
    })
}

#[derive(Debug, Serialize)]
struct TrajectoryCheck {
    x0: Vec<f64>,
    feasible_start: bool,
    /// Largest step increase of `V` (feasible) or `V_ε` (infeasible) beyond
    /// the discretization slack; ≤ 0 passes.
    decrease_excess: f64,
    dini: Vec<DiniReport>,
}

#[derive(Debug, Serialize)]
struct ContractionCheck {
    slope: Option<f64>,
    c_smf: f64,
    alpha_bound: f64,
    c_bar: Option<f64>,
    beta_bound: Option<f64>,
    guaranteed: bool,
    status: &'static str,
}

/// Feasible starts from the configuration or sampled around `x*`, and
/// infeasible starts with violation at most 0.5.
fn certify_starts(
    cfg: &RunConfig,
    c: &ConstraintSet,
    x_star: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>), CliError> {
    if !cfg.x0.is_empty() {
        let xs = starts(cfg, c.n())?;
        return Ok(xs.into_iter().partition(|x| c.contains(x, FEASIBLE_TOL)));
    }
    let feasible: Vec<DVector<f64>> = sample_feasible_points(c, x_star, 0.5, 4, rng)
        .map_err(|e| CliError::Domain(e.to_string()))?
        .into_iter()
        .skip(1)
        .collect();
    let mut infeasible = Vec::new();
    for _ in 0..2000 {
        if infeasible.len() == 3 {
            break;
        }
        let y = x_star + DVector::from_fn(c.n(), |_, _| StandardNormal.sample(rng)) * 0.8;
        let v = c.violation(&y);
        if v > 1e-3 && v <= 0.5 {
            infeasible.push(y);
        }
    }
    Ok((feasible, infeasible))
}

pub fn certify(cfg: &RunConfig) -> Result<Report, CliError> {
    let mut problem = load_problem(cfg)?;
    let params = FlowParams {
        t_final: cfg.t_final.unwrap_or(15.0),
        ..cfg.params()?
    };
    let mut notes = Vec::new();
    if problem.solution.is_none() {
        let x0 = starts(cfg, problem.dim())?.remove(0);
        let long = FlowParams {
            t_final: SOLUTION_T_FINAL,
            ..params
        };
        let state = FlowState::primal(x0, &problem.constraints);
        let traj = run_flow(FlowKind::Smf, &problem, &state, &long, true)?;
        if !traj.converged() {
            return Ok(Report {
                summary: format!("could not compute a solution: safe flow did not converge by t = {SOLUTION_T_FINAL}\n"),
                code: EXIT_NONCONVERGED,
                files: Vec::new(),
            });
        }
        notes.push(format!("solution computed by the safe flow: {}", fmt_vec(&traj.last().x)));
        problem.solution = Some(traj.last().x.clone());
    }
    let x_star = problem.solution.clone().unwrap();
    let (f, c) = (&problem.operator, &problem.constraints);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
    let ctx = CertificateContext::new(f, c, x_star.clone(), params.alpha).map_err(|e| CliError::Domain(e.to_string()))?;

    let samples = sample_feasible_points(c, &x_star, 0.5, 200, &mut rng).map_err(|e| CliError::Domain(e.to_string()))?;
    let w_sign: WSignReport =
        w_sign_check(f, c, params.alpha, &x_star, &samples, 1e-10, 1e-8).map_err(|e| CliError::Domain(e.to_string()))?;
    let mut violations = Vec::new();
    if !w_sign.passed {
        violations.push(format!(
            "W sign: max W = {:.3e}, {} spurious zeros",
            w_sign.max_w, w_sign.spurious_zeros
        ));
    }

    let (feasible, infeasible) = certify_starts(cfg, c, &x_star, &mut rng)?;
    let mut checks = Vec::new();
    let mut feasible_trajs = Vec::new();
    for (x0, is_feasible) in feasible.iter().map(|x| (x, true)).chain(infeasible.iter().map(|x| (x, false))) {
        let state = FlowState::primal(x0.clone(), c);
        let traj = run_flow(FlowKind::Smf, &problem, &state, &params, false)?;
        let values: Vec<f64> = traj
            .diagnostics
            .iter()
            .map(|d| {
                let l = d.lyapunov.expect("recorded");
                if is_feasible {
                    l.v
                } else {
                    l.v_eps
                }
            })
            .collect();
        let norms: Vec<f64> = traj.diagnostics.iter().map(|d| d.field_norm).collect();
        let excess = decrease_check(&values, &norms, params.h, ctx.slack_factor);
        let label = if is_feasible { "V" } else { "V_eps" };
        if excess > 0.0 {
            violations.push(format!("{label} increases from {} (excess {excess:.3e})", fmt_vec(x0)));
        }
        let report = certificate_report(&traj, &ctx, dini_kinds(FlowKind::Smf, is_feasible))
            .map_err(|e| CliError::Domain(e.to_string()))?;
        let mut dini = report.dini;
        for d in &mut dini {
            if !d.passed() {
                violations.push(format!("Dini bound {:?} fails from {} (excess {:.3e})", d.kind, fmt_vec(x0), d.max_violation));
            }
            d.per_step.clear();
        }
        checks.push(TrajectoryCheck {
            x0: x0.iter().copied().collect(),
            feasible_start: is_feasible,
            decrease_excess: excess,
            dini,
        });
        if is_feasible {
            feasible_trajs.push(traj);
        }
    }

    let contraction = match f.lipschitz() {
        Some(lf) => {
            let q = c.constraint_gram(&x_star);
            let rates = rate_formulas(f.monotonicity(), lf, params.alpha, &q, params.beta);
            let slope = match feasible_trajs.as_slice() {
                [a, b, ..] => contraction_estimate(a, b).ok(),
                _ => None,
            };
            let guaranteed = rates.contraction_guaranteed();
            if c.m() > 0 && rates.beta_bound.is_none() {
                notes.push("constraint Gram matrix at x* is singular; the β bound of the recursive flow does not apply".into());
            }
            let status = match (guaranteed, slope) {
                (false, _) => "not guaranteed",
                (true, None) => "guaranteed; slope unavailable",
                (true, Some(s)) if s <= -(1.0 - SLOPE_SLACK) * rates.c_smf => "guaranteed; measured",
                (true, Some(_)) => "guaranteed; measured slope too shallow",
            };
            if status == "guaranteed; measured slope too shallow" {
                violations.push(format!(
                    "contraction slope {:.4} above −{:.4}",
                    slope.unwrap(),
                    (1.0 - SLOPE_SLACK) * rates.c_smf
                ));
            }
            Some(ContractionCheck {
                slope,
                c_smf: rates.c_smf,
                alpha_bound: rates.alpha_bound,
                c_bar: rates.c_bar,
                beta_bound: rates.beta_bound,
                guaranteed,
                status,
            })
        }
        None => None,
    };

    let passed = violations.is_empty();
    let digest = cfg.digest("certify");
    let mut files = Vec::new();
    let doc = json!({
        "problem": problem.name,
        "alpha": params.alpha,
        "epsilon": ctx.epsilon,
        "x_star": x_star.as_slice(),
        "w_sign": w_sign,
        "trajectories": checks,
        "contraction": contraction,
        "notes": notes,
        "violations": violations,
        "passed": passed,
    });
    if cfg.write_certificate.unwrap_or(true) {
        write_file(cfg.out_dir().join(format!("certify-{digest}.json")), &json_bytes(&doc), &mut files)?;
    }

    let mut summary = format!(
        "problem {} | α = {} | x* = {} | {} feasible and {} infeasible starts\n",
        problem.name,
        params.alpha,
        fmt_vec(&x_star),
        feasible.len(),
        infeasible.len()
    );
    for n in &notes {
        summary.push_str(&format!("{n}\n"));
    }
    summary.push_str(&format!("W sign over {} samples: max W = {:.3e}\n", w_sign.samples, w_sign.max_w));
    if let Some(cc) = &contraction {
        summary.push_str(&format!(
            "contraction: {} (c = {:.4}, α bound {:.4}, slope {})\n",
            cc.status,
            cc.c_smf,
            cc.alpha_bound,
            cc.slope.map_or("n/a".to_string(), |s| format!("{s:.4}"))
        ));
    }
    for v in &violations {
        summary.push_str(&format!("violation: {v}\n"));
    }
    summary.push_str(if passed { "certificate: pass\n" } else { "certificate: FAIL\n" });
    Ok(Report {
        summary,
        code: if passed { EXIT_OK } else { EXIT_CERTIFICATE },
        files,
    })
}
