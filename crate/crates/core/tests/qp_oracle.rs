//! The QP solver against brute-force enumeration of active sets.

use monoflow::qp::{project_onto_set, solve_psd_qp, solve_qp, QpError, QpSettings, QpSpec};
use monoflow::ConstraintSet;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Minimizer over every subset of inequalities treated as equalities,
/// keeping the best KKT-feasible candidate; `None` when infeasible.
fn enumerate(spec: &QpSpec) -> Option<DVector<f64>> {
    let n = spec.dim();
    let p = spec.a_ineq.nrows();
    let k = spec.a_eq.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << p) {
        let rows: Vec<usize> = (0..p).filter(|i| mask & (1 << i) != 0).collect();
        let r = rows.len() + k;
        let mut kkt = DMatrix::zeros(n + r, n + r);
        let mut rhs = DVector::zeros(n + r);
        kkt.view_mut((0, 0), (n, n)).copy_from(&spec.p);
        rhs.rows_mut(0, n).copy_from(&(-&spec.q));
        for (j, &i) in rows.iter().enumerate() {
            let a = spec.a_ineq.row(i);
            kkt.view_mut((n + j, 0), (1, n)).copy_from(&a);
            kkt.view_mut((0, n + j), (n, 1)).copy_from(&a.transpose());
            rhs[n + j] = spec.b_ineq[i];
        }
        for j in 0..k {
            let a = spec.a_eq.row(j);
            kkt.view_mut((n + rows.len() + j, 0), (1, n)).copy_from(&a);
            kkt.view_mut((0, n + rows.len() + j), (n, 1)).copy_from(&a.transpose());
            rhs[n + rows.len() + j] = spec.b_eq[j];
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        if (&kkt * &sol - &rhs).amax() > 1e-8 {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        let feasible = (&spec.a_ineq * &x - &spec.b_ineq).iter().all(|&s| s <= 1e-9);
        let signs = (0..rows.len()).all(|j| sol[n + j] >= -1e-9);
        if feasible && signs {
            let obj = spec.objective(&x);
            if best.as_ref().is_none_or(|(b, _)| obj < *b - 1e-12) {
                best = Some((obj, x));
            }
        }
    }
    best.map(|(_, x)| x)
}

fn matrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, &data[..rows * cols])
}

fn qp_strategy() -> impl Strategy<Value = QpSpec> {
    (1usize..=4, 0usize..=5, 0usize..=1)
        .prop_flat_map(|(n, p, k)| {
            let k = k.min(n - 1);
            (
                Just((n, p, k)),
                prop::collection::vec(-2.0..2.0f64, n * n),
                prop::collection::vec(-3.0..3.0f64, n),
                prop::collection::vec(-2.0..2.0f64, p * n),
                prop::collection::vec(-1.0..2.0f64, p),
                prop::collection::vec(-2.0..2.0f64, k * n),
                prop::collection::vec(-1.0..1.0f64, k),
            )
        })
        .prop_map(|((n, p, k), lp, q, a, b, e, c)| {
            let l = matrix(n, n, &lp);
            let pm = &l * l.transpose() + DMatrix::identity(n, n) * 0.2;
            QpSpec::new(pm, DVector::from_vec(q))
                .with_inequalities(matrix(p, n, &a), DVector::from_vec(b))
                .with_equalities(matrix(k, n, &e), DVector::from_vec(c))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_enumeration(spec in qp_strategy()) {
        match (solve_qp(&spec, None), enumerate(&spec)) {
            (Ok(sol), Some(x)) => {
                let scale = 1.0 + x.amax();
                prop_assert!((&sol.xi - &x).amax() <= 1e-7 * scale, "solver {} oracle {}", sol.xi, x);
                prop_assert!(spec.kkt_residual(&sol.xi, &sol.u, &sol.v) <= 1e-7 * scale);
            }
            (Err(QpError::Infeasible { .. }), None) => {}
            (got, oracle) => prop_assert!(false, "solver {:?} vs oracle {:?}", got.map(|s| s.xi), oracle),
        }
    }

    #[test]
    fn warm_start_gives_same_point(spec in qp_strategy(), seed in prop::collection::vec(0usize..5, 0..3)) {
        let cold = solve_qp(&spec, None);
        let warm: Vec<usize> = seed.into_iter().filter(|&i| i < spec.a_ineq.nrows()).collect();
        let hot = solve_qp(&spec, Some(&warm));
        match (cold, hot) {
            (Ok(a), Ok(b)) => prop_assert!((&a.xi - &b.xi).amax() <= 1e-8 * (1.0 + a.xi.amax())),
            (Err(QpError::Infeasible { .. }), Err(QpError::Infeasible { .. })) => {}
            (a, b) => prop_assert!(false, "cold {:?} warm {:?}", a.map(|s| s.xi), b.map(|s| s.xi)),
        }
    }

    #[test]
    fn psd_solver_agrees_on_definite_problems(spec in qp_strategy()) {
        if let Ok(sol) = solve_qp(&spec, None) {
            let psd = solve_psd_qp(&spec, &QpSettings::default()).unwrap();
            let gap = spec.objective(&psd.xi) - spec.objective(&sol.xi);
            prop_assert!(gap.abs() <= 1e-6 * (1.0 + spec.objective(&sol.xi).abs()));
        }
    }

    #[test]
    fn projection_is_nonexpansive(
        y1 in prop::collection::vec(-4.0..4.0f64, 3),
        y2 in prop::collection::vec(-4.0..4.0f64, 3),
    ) {
        let g = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0]);
        let c = ConstraintSet::inequalities(g, DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        let (y1, y2) = (DVector::from_vec(y1), DVector::from_vec(y2));
        let p1 = project_onto_set(&c, &y1).unwrap();
        let p2 = project_onto_set(&c, &y2).unwrap();
        prop_assert!(c.contains(&p1, 1e-9));
        prop_assert!((&p1 - &p2).norm() <= (&y1 - &y2).norm() + 1e-9);
        // Variational characterization at every vertex of the simplex.
        for v in [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            let v = DVector::from_row_slice(&v);
            prop_assert!((&y1 - &p1).dot(&(v - &p1)) <= 1e-9);
        }
    }
}

#[test]
fn infeasible_problem_reports_a_certificate() {
    let spec = QpSpec::new(DMatrix::identity(1, 1), DVector::zeros(1))
        .with_inequalities(DMatrix::from_row_slice(2, 1, &[1.0, -1.0]), DVector::from_vec(vec![-1.0, -1.0]));
    match solve_qp(&spec, None) {
        Err(QpError::Infeasible { certificate, .. }) => {
            assert!(certificate.iter().all(|&y| y >= 0.0));
            let combo = spec.a_ineq.tr_mul(&certificate);
            assert!(combo.amax() <= 1e-9);
            assert!(spec.b_ineq.dot(&certificate) < 0.0);
        }
        other => panic!("expected infeasibility, got {other:?}"),
    }
}
