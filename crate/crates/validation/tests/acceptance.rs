//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use monoflow::analysis::{
    certificate_report, contraction_estimate, decrease_check, dini_bound_check, practical_safety_check,
    rate_formulas, sample_feasible_points, w_sign_check, CertificateContext, DiniKind,
};
use monoflow::flows::{integrate, integrate_pmf, integrate_rsmf, integrate_smf, IntegrateOptions, LyapunovSpec};
use monoflow::problems::{
    equality_line_problem, nonmonotone_rotation_problem, receding_horizon_run, two_player_game_problem,
    LqdgProblem, Termination, CANONICAL_SEED,
};
use monoflow::qp::{
    control_cbf, control_tangent_cone, project_restricted_tangent, project_tangent_cone, qp_lp_consistency,
    solve_dual_qp,
};
use monoflow::vi::kkt_residual;
use monoflow::{FlowKind, FlowParams, FlowState, KktTriple, Trajectory};
use nalgebra::{dvector, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn grid_starts() -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    for &(a, b) in &[
        (1.0, 1.0),
        (1.0, -1.0),
        (-1.0, 1.0),
        (-1.0, -1.0),
        (0.0, 1.0),
        (0.0, -1.0),
        (1.0, 0.0),
        (-1.0, 0.0),
    ] {
        out.push(dvector![a, b]);
    }
    out
}

fn uniform_point(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> DVector<f64> {
    dvector![rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Random point of `[−1, 1]²`, snapped to a face or corner half the time.
fn box_point(rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut x = uniform_point(rng, -1.0, 1.0);
    for i in 0..2 {
        if rng.random_bool(0.35) {
            x[i] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
    x
}

fn criterion_1() -> Outcome {
    let p = two_player_game_problem();
    let (f, c) = (&p.operator, &p.constraints);
    let xs = p.solution.clone().unwrap();
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for kind in FlowKind::ALL {
        let mut starts = grid_starts();
        if kind != FlowKind::Pmf {
            starts.push(dvector![1.5, 1.5]);
            starts.push(dvector![-1.5, 0.5]);
        }
        for x0 in starts {
            let traj = integrate(kind, f, c, &FlowState::primal(x0, c), &FlowParams::default(), &IntegrateOptions::default())
                .map_err(|e| format!("{kind}: {e}"))?;
            worst = worst.max((&traj.last().x - &xs).norm());
            runs += 1;
        }
    }
    check(worst <= 1e-4, format!("{runs} runs, max ‖x(15) − x*‖ = {worst:.3e} (≤ 1e-4)"))
}

fn criterion_2() -> Outcome {
    let p = two_player_game_problem();
    let (f, c) = (&p.operator, &p.constraints);
    let prm = FlowParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_feasible = f64::NEG_INFINITY;
    for _ in 0..20 {
        let traj = integrate_smf(f, c, &box_point(&mut rng), &prm).map_err(|e| e.to_string())?;
        worst_feasible = worst_feasible.max(traj.max_gmax());
    }
    let mut worst_excess = f64::NEG_INFINITY;
    let mut count = 0;
    while count < 10 {
        let x0 = uniform_point(&mut rng, -1.5, 1.5);
        let g0 = c.g(&x0);
        let gmax = g0.max();
        if gmax <= 0.0 || gmax > 0.5 {
            continue;
        }
        count += 1;
        let traj = integrate_smf(f, c, &x0, &prm).map_err(|e| e.to_string())?;
        for s in &traj.states {
            let g = c.g(&s.x);
            for i in 0..g.len() {
                let bound = g0[i] * (-prm.alpha * s.t).exp() + 1e-4;
                worst_excess = worst_excess.max(g[i] - bound);
            }
        }
    }
    check(
        worst_feasible <= 1e-6 && worst_excess <= 0.0,
        format!(
            "feasible starts: max g = {worst_feasible:.3e} (≤ 1e-6); infeasible starts: max g_i(x(t)) − (g_i(x0)e^(−αt) + 1e-4) = {worst_excess:.3e} (≤ 0)"
        ),
    )
}

fn criterion_3() -> Outcome {
    let p = equality_line_problem();
    let (f, c) = (&p.operator, &p.constraints);
    let prm = FlowParams::default();
    let mut worst: f64 = 0.0;
    for x0 in [dvector![1.0, 0.5], dvector![-2.0, -1.0], dvector![0.3, 2.0]] {
        let h0 = c.h(&x0)[0];
        let traj = integrate_smf(f, c, &x0, &prm).map_err(|e| e.to_string())?;
        for s in &traj.states {
            let expected = h0 * (-prm.alpha * s.t).exp();
            worst = worst.max(((c.h(&s.x)[0] - expected) / expected).abs());
        }
    }
    check(worst <= 1e-4, format!("max relative error of h(x(t)) vs h(x0)e^(−αt) = {worst:.3e} (≤ 1e-4)"))
}

fn slope(kind: FlowKind, alpha: f64) -> Result<f64, String> {
    let p = two_player_game_problem();
    let (f, c) = (&p.operator, &p.constraints);
    let prm = FlowParams {
        alpha,
        ..FlowParams::default()
    };
    let run = |x0: DVector<f64>| -> Result<Trajectory, String> {
        match kind {
            FlowKind::Pmf => integrate_pmf(f, c, &x0, &prm),
            _ => integrate_smf(f, c, &x0, &prm),
        }
        .map_err(|e| e.to_string())
    };
    let a = run(dvector![1.0, 1.0])?;
    let b = run(dvector![-1.0, 1.0])?;
    contraction_estimate(&a, &b).map_err(|e| e.to_string())
}

fn criterion_4() -> Outcome {
    let s1 = slope(FlowKind::Smf, 1.0)?;
    let s06 = slope(FlowKind::Smf, 0.6)?;
    let sp = slope(FlowKind::Pmf, 1.0)?;
    let bound06 = -(1.0 - 2.0 / (4.0 * 0.6)) + 0.05;
    check(
        s1 <= -0.45 && s06 <= bound06 && sp <= -0.95,
        format!("SMF α=1 slope {s1:.4} (≤ −0.45); SMF α=0.6 slope {s06:.4} (≤ {bound06:.4}); PMF slope {sp:.4} (≤ −0.95)"),
    )
}

fn criterion_5() -> Outcome {
    let p = two_player_game_problem();
    let (f, c) = (&p.operator, &p.constraints);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut cone, mut cbf): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let x = box_point(&mut rng);
        let a = control_tangent_cone(f, c, &x, 1e-8).map_err(|e| e.to_string())?;
        let b = project_tangent_cone(f, c, &x, 1e-8).map_err(|e| e.to_string())?;
        cone = cone.max((&a.xi - &b.xi).amax());

        let y = uniform_point(&mut rng, -2.0, 2.0);
        let a = control_cbf(f, c, &y, 1.0).map_err(|e| e.to_string())?;
        let b = project_restricted_tangent(f, c, &y, 1.0).map_err(|e| e.to_string())?;
        cbf = cbf.max((&a.xi - &b.xi).amax());
    }
    check(
        cone <= 1e-8 && cbf <= 1e-8,
        format!("max |Δξ|: tangent cone {cone:.3e}, restricted tangent {cbf:.3e} (≤ 1e-8, 200 points)"),
    )
}

fn criterion_6() -> Outcome {
    let p = two_player_game_problem();
    let (f, c) = (&p.operator, &p.constraints);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut inconsistent = 0;
    for _ in 0..200 {
        let x = uniform_point(&mut rng, -2.0, 2.0);
        let alpha = rng.random_range(0.2..3.0);
        let dual = solve_dual_qp(f, c, &x, alpha).map_err(|e| e.to_string())?;
        let primal = project_restricted_tangent(f, c, &x, alpha).map_err(|e| e.to_string())?;
        worst = worst.max((&dual.xi - &primal.xi).amax());
        if !qp_lp_consistency(&dual.gram, &dual.linear, &dual.multipliers(), c.m(), 1e-8).consistent {
            inconsistent += 1;
        }
    }
    check(
        worst <= 1e-8 && inconsistent == 0,
        format!("max |Δξ| = {worst:.3e} (≤ 1e-8); LP-inconsistent instances: {inconsistent}/200"),
    )
}

fn criterion_7() -> Outcome {
    let p = two_player_game_problem();
    let (f, c) = (&p.operator, &p.constraints);
    let xs = p.solution.clone().unwrap();
    let alpha = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples = sample_feasible_points(c, &xs, 0.8, 200, &mut rng).map_err(|e| e.to_string())?;
    let sign = w_sign_check(f, c, alpha, &xs, &samples, 1e-10, 1e-8).map_err(|e| e.to_string())?;

    let prm = FlowParams::default();
    let opts = IntegrateOptions {
        lyapunov: Some(LyapunovSpec::new(xs.clone())),
        ..IntegrateOptions::default()
    };
    let ctx = CertificateContext::new(f, c, xs.clone(), alpha).map_err(|e| e.to_string())?;
    let mut v_excess = f64::NEG_INFINITY;
    let mut veps_excess = f64::NEG_INFINITY;
    let mut dini_feasible = f64::NEG_INFINITY;
    let mut dini_infeasible = f64::NEG_INFINITY;
    let feasible = [dvector![1.0, 1.0], dvector![-1.0, 0.3], dvector![0.6, -1.0]];
    let infeasible = [dvector![1.5, 1.5], dvector![-1.5, 0.5], dvector![0.2, -1.4]];
    for (starts, is_feasible) in [(&feasible, true), (&infeasible, false)] {
        for x0 in starts.iter() {
            let traj = integrate(FlowKind::Smf, f, c, &FlowState::primal(x0.clone(), c), &prm, &opts)
                .map_err(|e| e.to_string())?;
            let lv: Vec<_> = traj.diagnostics.iter().map(|d| d.lyapunov.unwrap()).collect();
            let norms: Vec<f64> = traj.diagnostics.iter().map(|d| d.field_norm).collect();
            let kinds: &[DiniKind] = if is_feasible {
                &DiniKind::ALL
            } else {
                &[DiniKind::VTilde, DiniKind::VEps, DiniKind::DeltaEps, DiniKind::W]
            };
            let mut dini = f64::NEG_INFINITY;
            for &k in kinds {
                dini = dini.max(dini_bound_check(&traj, k, &ctx).map_err(|e| e.to_string())?.max_violation);
            }
            if is_feasible {
                let v: Vec<f64> = lv.iter().map(|l| l.v).collect();
                v_excess = v_excess.max(decrease_check(&v, &norms, prm.h, 10.0));
                dini_feasible = dini_feasible.max(dini);
            } else {
                let v: Vec<f64> = lv.iter().map(|l| l.v_eps).collect();
                veps_excess = veps_excess.max(decrease_check(&v, &norms, prm.h, 10.0));
                dini_infeasible = dini_infeasible.max(dini);
            }
        }
    }
    check(
        sign.passed && v_excess <= 0.0 && veps_excess <= 0.0 && dini_feasible <= 0.0 && dini_infeasible <= 0.0,
        format!(
            "max W = {:.3e}, spurious zeros {}; V increase excess {v_excess:.3e}; V_ε increase excess {veps_excess:.3e}; Dini excess feasible {dini_feasible:.3e}, infeasible {dini_infeasible:.3e} (all ≤ 0)",
            sign.max_w, sign.spurious_zeros
        ),
    )
}

fn criterion_8() -> Outcome {
    let p = two_player_game_problem();
    let (f, c) = (&p.operator, &p.constraints);
    let x0 = dvector![0.5, 0.9];
    let mut tracking = Vec::new();
    let mut kkt = f64::NAN;
    let mut safety = Vec::new();
    for tau in [0.25, 0.1, 0.04] {
        let prm = FlowParams {
            tau,
            ..FlowParams::default()
        };
        let traj = integrate_rsmf(f, c, &FlowState::primal(x0.clone(), c), &prm).map_err(|e| e.to_string())?;
        let s = traj.last();
        if tau == 0.25 {
            kkt = kkt_residual(f, c, &KktTriple::new(s.x.clone(), s.u.clone(), s.v.clone())).map_err(|e| e.to_string())?;
        }
        tracking.push(traj.max_tracking_error().unwrap());
        let ps = practical_safety_check(&traj, c, 1.0);
        safety.push((ps.max_excursion.max(0.0), ps.predicted.unwrap()));
    }
    let monotone = tracking.windows(2).all(|w| w[1] < w[0]);
    let bounded = safety.iter().all(|&(e, pred)| e <= pred + 1e-6);
    check(
        kkt <= 1e-4 && monotone && bounded,
        format!(
            "KKT residual {kkt:.3e} (≤ 1e-4); sup tracking error for τ = 0.25, 0.1, 0.04: {:.3e}, {:.3e}, {:.3e}; excursion/prediction {}",
            tracking[0],
            tracking[1],
            tracking[2],
            safety
                .iter()
                .map(|(e, p)| format!("{e:.2e}/{p:.2e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn criterion_9() -> Outcome {
    let problem = LqdgProblem::canonical(CANONICAL_SEED).map_err(|e| e.to_string())?;
    let z0 = problem.canonical_z0();
    let mut min_input = f64::INFINITY;
    let mut terminal = Vec::new();
    let mut exact_ratio = f64::NAN;
    for t in [
        Termination::Time(0.1),
        Termination::Time(0.5),
        Termination::Time(2.0),
        Termination::Exact,
    ] {
        let run = receding_horizon_run(&problem, &z0, FlowKind::Smf, t, 30, &FlowParams::default())
            .map_err(|e| e.to_string())?;
        min_input = min_input.min(run.min_input());
        let zn = run.znorm();
        terminal.push(zn[30]);
        if t == Termination::Exact {
            exact_ratio = zn[30] / zn[0];
        }
    }
    let feasible = min_input >= -1e-9;
    let ordered = terminal.windows(2).all(|w| w[1] <= w[0]);
    let decays = exact_ratio < 0.1;
    check(
        feasible && ordered && decays,
        format!(
            "min input {min_input:.3e} (≥ −1e-9: {}); ‖z(30)‖ for t_f = 0.1, 0.5, 2, ∞: {} (nonincreasing: {}); ∞ run ‖z(30)‖/‖z(0)‖ = {exact_ratio:.3e} (< 0.1: {})",
            pass_word(feasible),
            terminal.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", "),
            pass_word(ordered),
            pass_word(decays)
        ),
    )
}

fn criterion_10() -> Outcome {
    let p = nonmonotone_rotation_problem();
    let (f, c) = (&p.operator, &p.constraints);
    let xs = p.solution.clone().unwrap();
    let prm = FlowParams::default();
    let opts = IntegrateOptions {
        lyapunov: Some(LyapunovSpec::new(xs.clone())),
        ..IntegrateOptions::default()
    };
    let traj = integrate(FlowKind::Smf, f, c, &FlowState::primal(dvector![0.1, 0.05], c), &prm, &opts)
        .map_err(|e| e.to_string())?;
    let v: Vec<f64> = traj.diagnostics.iter().map(|d| d.lyapunov.unwrap().v).collect();
    let norms: Vec<f64> = traj.diagnostics.iter().map(|d| d.field_norm).collect();
    let excess = decrease_check(&v, &norms, prm.h, 10.0);
    let ctx = CertificateContext::new(f, c, xs, 1.0).map_err(|e| e.to_string())?.with_mu(0.0);
    let report = certificate_report(&traj, &ctx, &[DiniKind::VRelativeC]).map_err(|e| e.to_string())?;

    let game = two_player_game_problem();
    let q = game.constraints.constraint_gram(&dvector![0.0, 0.0]);
    let lf = game.operator.lipschitz().unwrap();
    let low = rate_formulas(1.0, lf, 0.4, &q, 1.0);
    let high = rate_formulas(1.0, lf, 1.0, &q, 1.0);
    check(
        excess > 0.0 && !report.passed() && !low.contraction_guaranteed() && high.contraction_guaranteed(),
        format!(
            "non-monotone: V increase excess {excess:.3e} (> 0), certificate rejected: {}; α = 0.4: c = {:.4} (not guaranteed), α = 1: c = {:.4}",
            !report.passed(),
            low.c_smf,
            high.c_smf
        ),
    )
}

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "yes"
    } else {
        "no"
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("convergence of all three flows on the two-player game", criterion_1),
        ("forward invariance and asymptotic safety of the safe flow", criterion_2),
        ("exponential decay of the equality residual", criterion_3),
        ("contraction rates", criterion_4),
        ("control-based and projection-based fields agree", criterion_5),
        ("dual program reproduces the safe field", criterion_6),
        ("Lyapunov and Dini certificates", criterion_7),
        ("recursive flow: KKT limit, tracking, practical safety", criterion_8),
        ("receding-horizon game: feasibility, ordering, decay", criterion_9),
        ("negative controls", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {:>2}: {name} [{secs:.2} s] {detail}", i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
