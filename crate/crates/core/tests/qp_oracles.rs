mod common;

use common::{brute_force_qp, qp_backward_fd_error, random_feasible_qp, rng, strictly_complementary, uniform_vec};
use diffcbf::qp::{self, solve_safety_qp, QpStatus, SafetyRow};
use rand::Rng;

#[test]
fn solver_matches_active_set_enumeration() {
    let mut r = rng(1);
    for _ in 0..300 {
        let (n, m) = (r.random_range(1..5), r.random_range(1..7));
        let prob = random_feasible_qp(&mut r, n, m);
        let sol = qp::solve(&prob);
        assert_eq!(sol.status, QpStatus::Optimal);
        let (u, lambda) = brute_force_qp(&prob).expect("feasible by construction");
        for (a, b) in sol.u.iter().zip(&u) {
            assert!((a - b).abs() < 1e-8, "{:?} vs {u:?}", sol.u);
        }
        for (a, b) in sol.lambda.iter().zip(&lambda) {
            assert!((a - b).abs() < 1e-7, "{:?} vs {lambda:?}", sol.lambda);
        }
    }
}

#[test]
fn kkt_residuals_are_small() {
    let mut r = rng(2);
    for _ in 0..500 {
        let (n, m) = (r.random_range(1..6), r.random_range(0..9));
        let prob = random_feasible_qp(&mut r, n, m);
        let sol = qp::solve(&prob);
        let scale = 1.0 + prob.f().iter().chain(prob.b()).fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(sol.kkt_residual(&prob) < 1e-10 * scale, "residual {}", sol.kkt_residual(&prob));
    }
}

#[test]
fn infeasible_problems_are_reported() {
    // u ≤ −1 and −u ≤ −1 (u ≥ 1)
    let prob = qp::QpProblem::new(
        diffcbf::linalg::Mat::identity(1),
        vec![0.0],
        diffcbf::linalg::Mat::from_rows(&[vec![1.0], vec![-1.0]]),
        vec![-1.0, -1.0],
    )
    .unwrap();
    assert_eq!(qp::solve(&prob).status, QpStatus::Infeasible);
}

#[test]
fn implicit_gradients_match_finite_differences() {
    let mut r = rng(3);
    let mut accepted = 0;
    let mut worst: f64 = 0.0;
    while accepted < 100 {
        let (n, m) = (r.random_range(2..5), r.random_range(1..6));
        let prob = random_feasible_qp(&mut r, n, m);
        let sol = qp::solve(&prob);
        if !strictly_complementary(&prob, &sol, 1e-3) {
            continue;
        }
        let c = uniform_vec(&mut r, n, -1.0, 1.0);
        worst = worst.max(qp_backward_fd_error(&prob, &c));
        accepted += 1;
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

fn random_rows(r: &mut rand_chacha::ChaCha8Rng, k: usize, m: usize) -> Vec<SafetyRow<f64>> {
    (0..k)
        .map(|_| SafetyRow {
            a: uniform_vec(r, m, -2.0, 2.0),
            rhs: r.random_range(-1.0..1.0),
        })
        .collect()
}

#[test]
fn filter_passes_through_feasible_reference() {
    let mut r = rng(4);
    for _ in 0..200 {
        let u_perf = uniform_vec(&mut r, 2, -1.0, 1.0);
        let mut rows = random_rows(&mut r, 2, 2);
        for row in &mut rows {
            let lhs: f64 = row.a.iter().zip(&u_perf).map(|(a, b)| a * b).sum();
            row.rhs = row.rhs.abs() + 0.01 - lhs;
        }
        for slack in [false, true] {
            let out = solve_safety_qp(&u_perf, &rows, 1000.0, slack, None).unwrap();
            assert_eq!(out.control(), &u_perf[..]);
            assert!(out.slacks().iter().all(|&s| s == 0.0));
        }
    }
}

#[test]
fn filter_is_idempotent() {
    let mut r = rng(5);
    let mut checked = 0;
    for _ in 0..300 {
        let u_perf = uniform_vec(&mut r, 2, -3.0, 3.0);
        let k = r.random_range(1..4);
        let rows = random_rows(&mut r, k, 2);
        let first = solve_safety_qp(&u_perf, &rows, 1000.0, false, None).unwrap();
        if !first.solution.is_optimal() {
            continue;
        }
        let u1 = first.control().to_vec();
        for row in &rows {
            let lhs: f64 = row.a.iter().zip(&u1).map(|(a, b)| a * b).sum();
            assert!(lhs + row.rhs >= -1e-9);
        }
        let second = solve_safety_qp(&u1, &rows, 1000.0, false, None).unwrap();
        for (a, b) in second.control().iter().zip(&u1) {
            assert!((a - b).abs() < 1e-9);
        }
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn slack_absorbs_conflicting_constraints() {
    // u ≥ 1 and u ≤ −1 cannot both hold.
    let rows: Vec<SafetyRow<f64>> = vec![SafetyRow { a: vec![1.0], rhs: -1.0 }, SafetyRow { a: vec![-1.0], rhs: -1.0 }];
    let hard = solve_safety_qp(&[0.0], &rows, 1000.0, false, None).unwrap();
    assert!(!hard.solution.is_optimal());
    let fallback = solve_safety_qp(&[0.0], &rows, 1000.0, false, Some(1e6)).unwrap();
    assert!(fallback.fallback_used && fallback.solution.is_optimal());
    let soft = solve_safety_qp(&[0.0], &rows, 1000.0, true, None).unwrap();
    let s = soft.slacks();
    assert!(soft.control()[0].abs() < 1e-9);
    assert!((s[0] - 1.0).abs() < 1e-9 && (s[1] - 1.0).abs() < 1e-9);
}
