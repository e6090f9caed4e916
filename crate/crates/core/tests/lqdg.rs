//! Dynamic game construction: prediction matrices, payoff, saddle point and
//! the receding-horizon loop.

use monoflow::flows::{integrate_smf, FlowParams};
use monoflow::linalg::spectral_radius;
use monoflow::problems::{
    marginally_stable_matrix, receding_horizon_run, receding_step_size, shift_inputs, LqdgProblem, Termination,
    CANONICAL_SEED,
};
use monoflow::FlowKind;
use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Characteristic polynomial coefficients `c₀…c_n` (monic, `c_n = 1`) by
/// the Faddeev–LeVerrier recursion.
fn char_poly(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for k in 1..=n {
        m = a * &m + DMatrix::identity(n, n) * c[n - k + 1];
        c[n - k] = -(a * &m).trace() / k as f64;
    }
    c
}

/// All roots of a monic polynomial by Durand–Kerner iteration.
fn roots(c: &[f64]) -> Vec<Complex<f64>> {
    let n = c.len() - 1;
    let eval = |z: Complex<f64>| c.iter().rev().fold(Complex::new(0.0, 0.0), |acc, &ci| acc * z + ci);
    let seed = Complex::new(0.4, 0.9);
    let mut z: Vec<Complex<f64>> = (0..n).map(|k| seed.powu(k as u32)).collect();
    for _ in 0..2000 {
        for i in 0..n {
            let mut den = Complex::new(1.0, 0.0);
            for j in 0..n {
                if j != i {
                    den *= z[i] - z[j];
                }
            }
            let zi = z[i];
            z[i] = zi - eval(zi) / den;
        }
    }
    z
}

fn root_radius(a: &DMatrix<f64>) -> f64 {
    roots(&char_poly(a)).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[test]
fn spectral_radius_matches_characteristic_roots() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 1..=6 {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.5..1.5));
        let oracle = root_radius(&a);
        assert!((spectral_radius(&a) - oracle).abs() <= 1e-8 * (1.0 + oracle), "n = {n}");
    }
}

#[test]
fn marginally_stable_matrix_has_unit_radius() {
    for seed in [0, 1, 7, CANONICAL_SEED, 1234] {
        let a = marginally_stable_matrix(5, seed);
        assert!((root_radius(&a) - 1.0).abs() <= 1e-9, "seed {seed}");
        assert_eq!(a, marginally_stable_matrix(5, seed));
    }
}

fn random_game(rng: &mut ChaCha8Rng, horizon: usize) -> LqdgProblem {
    let (nz, nw) = (3, 2);
    let a = DMatrix::from_fn(nz, nz, |_, _| rng.random_range(-0.7..0.7));
    let b1 = DMatrix::from_fn(nz, nw, |_, _| rng.random_range(-1.0..1.0));
    let b2 = DMatrix::from_fn(nz, nw, |_, _| rng.random_range(-1.0..1.0));
    LqdgProblem::new(
        a,
        b1,
        b2,
        DMatrix::identity(nz, nz),
        DMatrix::identity(nz, nz) * 2.0,
        DMatrix::identity(nw, nw),
        DMatrix::identity(nw, nw) * 50.0,
        horizon,
    )
    .expect("monotone with a heavy R2")
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

#[test]
fn impulse_response_matches_direct_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_game(&mut rng, 4);
    let pred = p.prediction();
    let (nz, nw, n) = (p.nz(), p.nw(), p.horizon);
    let z0 = random_vec(&mut rng, nz, -1.0, 1.0);
    for player in 0..2 {
        for stage in 0..n {
            for comp in 0..nw {
                let mut w1 = vec![DVector::zeros(nw); n];
                let mut w2 = vec![DVector::zeros(nw); n];
                let mut flat = DVector::zeros(n * nw);
                if player == 0 {
                    w1[stage][comp] = 1.0;
                } else {
                    w2[stage][comp] = 1.0;
                }
                flat[stage * nw + comp] = 1.0;
                let zs = p.simulate(&z0, &w1, &w2);
                let c = if player == 0 { &pred.c1 } else { &pred.c2 };
                let stacked = &pred.script_a * &z0 + c * &flat;
                for s in 0..n {
                    let diff = (stacked.rows(s * nz, nz) - &zs[s + 1]).amax();
                    assert!(diff <= 1e-12, "player {player} stage {stage} row {s}");
                }
            }
        }
    }
}

#[test]
fn payoff_identity_holds_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let horizon = rng.random_range(1..=5);
        let p = random_game(&mut rng, horizon);
        let z0 = random_vec(&mut rng, p.nz(), -2.0, 2.0);
        let x = random_vec(&mut rng, p.dim(), -1.0, 1.0);
        let constant = z0.dot(&(&p.q * &z0));
        let direct = p.payoff(&z0, &x);
        let stacked = p.stacked_payoff(&z0, &x) + constant;
        assert!((direct - stacked).abs() <= 1e-10 * (1.0 + direct.abs()));
    }
}

/// The operator is half the gradient of the payoff with player 2's rows
/// negated; checked by finite differences of the simulated payoff.
#[test]
fn operator_is_the_payoff_pseudogradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_game(&mut rng, 3);
    let z0 = random_vec(&mut rng, p.nz(), -1.0, 1.0);
    let x = random_vec(&mut rng, p.dim(), -1.0, 1.0);
    let f = p.operator(&z0).eval(&x);
    let d = p.dim() / 2;
    let step = 1e-5;
    for i in 0..p.dim() {
        let mut e = DVector::zeros(p.dim());
        e[i] = step;
        let grad = (p.payoff(&z0, &(&x + &e)) - p.payoff(&z0, &(&x - &e))) / (2.0 * step);
        let expected = if i < d { grad / 2.0 } else { -grad / 2.0 };
        assert!((f[i] - expected).abs() <= 1e-6 * (1.0 + expected.abs()), "component {i}");
    }
}

#[test]
fn single_stage_operator_reduces_to_block_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random_game(&mut rng, 1);
    let m = p.operator_matrix();
    let (b1, b2, qf) = (&p.b1, &p.b2, &p.qf);
    let expected_11 = b1.transpose() * qf * b1 + &p.r1;
    let expected_12 = b1.transpose() * qf * b2;
    let expected_21 = -(b2.transpose() * qf * b1);
    let expected_22 = &p.r2 - b2.transpose() * qf * b2;
    let nw = p.nw();
    assert!((m.view((0, 0), (nw, nw)) - expected_11).amax() <= 1e-12);
    assert!((m.view((0, nw), (nw, nw)) - expected_12).amax() <= 1e-12);
    assert!((m.view((nw, 0), (nw, nw)) - expected_21).amax() <= 1e-12);
    assert!((m.view((nw, nw), (nw, nw)) - expected_22).amax() <= 1e-12);
}

/// At the equilibrium of the game on the orthant, neither player improves
/// by a unilateral feasible deviation.
#[test]
fn flow_limit_is_a_saddle_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = random_game(&mut rng, 3);
    let z0 = random_vec(&mut rng, p.nz(), -2.0, 2.0);
    let f = p.operator(&z0);
    let c = p.constraints();
    let prm = FlowParams {
        h: receding_step_size(&f),
        t_final: 40.0,
        ..FlowParams::default()
    };
    let traj = integrate_smf(&f, &c, &DVector::zeros(p.dim()), &prm).unwrap();
    let xs = traj.last().x.clone();
    assert!(xs.iter().all(|&v| v >= -1e-9));
    let j = p.payoff(&z0, &xs);
    let d = p.dim() / 2;
    for _ in 0..200 {
        let mut dev = xs.clone();
        let player = rng.random_range(0..2);
        for i in player * d..(player + 1) * d {
            dev[i] = (dev[i] + rng.random_range(-0.5..0.5)).max(0.0);
        }
        let jd = p.payoff(&z0, &dev);
        if player == 0 {
            assert!(jd >= j - 1e-8, "player 1 improves: {jd} < {j}");
        } else {
            assert!(jd <= j + 1e-8, "player 2 improves: {jd} > {j}");
        }
    }
}

#[test]
fn canonical_instance_is_monotone_and_deterministic() {
    let p = LqdgProblem::canonical(CANONICAL_SEED).unwrap();
    assert_eq!((p.nz(), p.nw(), p.horizon), (5, 2, 5));
    assert!(p.monotonicity_margin() > 0.0);
    assert_eq!(p, LqdgProblem::canonical(CANONICAL_SEED).unwrap());
    let long = LqdgProblem::canonical_with_horizon(CANONICAL_SEED, 12).unwrap();
    assert!(long.monotonicity_margin() > 0.0);
    assert!(long.r2[(0, 0)] >= p.r2[(0, 0)]);
}

#[test]
fn shift_drops_first_stage_of_each_player() {
    let x = DVector::from_iterator(12, (0..12).map(|v| v as f64));
    let s = shift_inputs(&x, 2, 3);
    assert_eq!(s.as_slice(), &[2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 8.0, 9.0, 10.0, 11.0, 0.0, 0.0]);
}

#[test]
fn inputs_stay_feasible_for_the_safe_flows() {
    let p = LqdgProblem::canonical(CANONICAL_SEED).unwrap();
    let z0 = p.canonical_z0();
    for flow in [FlowKind::Pmf, FlowKind::Smf] {
        let h = receding_step_size(&p.operator(&z0));
        for t in [Termination::Time(h), Termination::Time(0.1)] {
            let run = receding_horizon_run(&p, &z0, flow, t, 8, &FlowParams::default()).unwrap();
            assert!(run.min_input() >= -1e-9, "{flow} {}", t.label());
            assert_eq!(run.z.len(), 9);
        }
    }
}

#[test]
fn exact_proxy_stabilizes_a_fully_actuated_game() {
    let (nz, n) = (3, 4);
    let a = marginally_stable_matrix(nz, 9);
    let b = DMatrix::identity(nz, nz);
    let p = LqdgProblem::new(
        a,
        b.clone(),
        b,
        DMatrix::identity(nz, nz),
        DMatrix::identity(nz, nz),
        DMatrix::identity(nz, nz),
        DMatrix::identity(nz, nz) * 40.0,
        n,
    )
    .unwrap();
    let z0 = DVector::from_element(nz, -1.0);
    let run = receding_horizon_run(&p, &z0, FlowKind::Smf, Termination::Exact, 30, &FlowParams::default()).unwrap();
    let zn = run.znorm();
    assert!(zn[30] < 0.1 * zn[0], "‖z(30)‖/‖z(0)‖ = {}", zn[30] / zn[0]);
}

#[test]
fn rejects_nonpositive_termination_time() {
    let p = LqdgProblem::canonical(CANONICAL_SEED).unwrap();
    let z0 = p.canonical_z0();
    assert!(receding_horizon_run(&p, &z0, FlowKind::Smf, Termination::Time(0.0), 1, &FlowParams::default()).is_err());
    assert!("inf".parse::<Termination>().unwrap() == Termination::Exact);
    assert!("-1".parse::<Termination>().is_err());
}
