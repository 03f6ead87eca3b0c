//! Independent oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use diffcbf::alpha_net::AlphaNet;
use diffcbf::autodiff::Tape;
use diffcbf::barrier::{alpha_rhs, poles_to_kalpha, EcbfCascade, EnvironmentInfo};
use diffcbf::dynamics::{integrator_chain, LinearCtrlAffineSystem};
use diffcbf::linalg::Mat;
use diffcbf::qp::{self, QpProblem, QpSolution};
use diffcbf::training::{Scenario, TrainConfig, TrainContext};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Central differences of a scalar function.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

/// Strictly convex QP with `n` variables and `m` constraints that is strictly
/// feasible at a random point.
pub fn random_feasible_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem<f64> {
    let a = Mat::from_vec(n, n, uniform_vec(rng, n * n, -1.0, 1.0));
    let h = a.transpose().matmul(&a).add(&Mat::identity(n)).symmetrized();
    let f = uniform_vec(rng, n, -2.0, 2.0);
    let g = Mat::from_vec(m, n, uniform_vec(rng, m * n, -1.0, 1.0));
    let u0 = uniform_vec(rng, n, -1.0, 1.0);
    let b: Vec<f64> = g.matvec(&u0).iter().map(|v| v + rng.random_range(0.05..1.0)).collect();
    QpProblem::new(h, f, g, b).unwrap()
}

/// Enumerates every active set, solving the equality-constrained KKT system
/// with a dense LU, and returns the unique primal-dual feasible point.
pub fn brute_force_qp(prob: &QpProblem<f64>) -> Option<(Vec<f64>, Vec<f64>)> {
    let (n, m) = (prob.n_vars(), prob.n_constraints());
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = act.len();
        let mut kkt = Mat::zeros(n + k, n + k);
        kkt.set_block(0, 0, prob.h());
        let mut rhs: Vec<f64> = prob.f().iter().map(|v| -v).collect();
        for (c, &w) in act.iter().enumerate() {
            for j in 0..n {
                kkt[(j, n + c)] = prob.g()[(w, j)];
                kkt[(n + c, j)] = prob.g()[(w, j)];
            }
            rhs.push(prob.b()[w]);
        }
        let Some(z) = kkt.solve(&rhs) else { continue };
        let u = z[..n].to_vec();
        let mut lambda = vec![0.0; m];
        for (c, &w) in act.iter().enumerate() {
            lambda[w] = z[n + c];
        }
        let feasible = (0..m).all(|i| prob.g().row(i).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() <= prob.b()[i] + 1e-9);
        if feasible && lambda.iter().all(|&l| l >= -1e-9) {
            let hu = prob.h().matvec(&u);
            let cost = 0.5 * u.iter().zip(&hu).map(|(a, b)| a * b).sum::<f64>() + prob.f().iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
            if best.as_ref().is_none_or(|b| cost < b.0) {
                best = Some((cost, u, lambda));
            }
        }
    }
    best.map(|(_, u, l)| (u, l))
}

/// Active multipliers clearly positive and inactive constraints clearly slack.
pub fn strictly_complementary(prob: &QpProblem<f64>, sol: &QpSolution<f64>, tol: f64) -> bool {
    (0..prob.n_constraints()).all(|i| {
        let slack = prob.b()[i] - prob.g().row(i).iter().zip(&sol.u).map(|(a, b)| a * b).sum::<f64>();
        (sol.lambda[i] > tol && slack.abs() < 1e-9) || (sol.lambda[i] == 0.0 && slack > tol)
    })
}

/// Relative error of the implicit gradient of `c·u*` with respect to
/// `(b, f, G, H)` against central differences.
pub fn qp_backward_fd_error(prob: &QpProblem<f64>, c: &[f64]) -> f64 {
    let sol = qp::solve(prob);
    let grads = qp::backward(prob, &sol, c).unwrap();
    let obj = |p: &QpProblem<f64>| {
        let s = qp::solve(p);
        s.u.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()
    };
    let eps = 1e-6;
    let (n, m) = (prob.n_vars(), prob.n_constraints());
    let fd_b = central_diff(|b| obj(&prob.with_b(b.to_vec())), prob.b(), eps);
    let fd_f = central_diff(|f| obj(&prob.with_f(f.to_vec())), prob.f(), eps);
    let fd_g = central_diff(
        |g| obj(&QpProblem::new(prob.h().clone(), prob.f().to_vec(), Mat::from_vec(m, n, g.to_vec()), prob.b().to_vec()).unwrap()),
        prob.g().as_slice(),
        eps,
    );
    let mut fd_h = Vec::new();
    let mut an_h = Vec::new();
    for i in 0..n {
        for j in i..n {
            let f = |d: f64| {
                let mut h = prob.h().clone();
                h[(i, j)] += d;
                if i != j {
                    h[(j, i)] += d;
                }
                obj(&QpProblem::new(h, prob.f().to_vec(), prob.g().clone(), prob.b().to_vec()).unwrap())
            };
            fd_h.push((f(eps) - f(-eps)) / (2.0 * eps));
            an_h.push(if i == j { grads.dh[(i, i)] } else { grads.dh[(i, j)] + grads.dh[(j, i)] });
        }
    }
    let analytic = [&grads.db[..], &grads.df, grads.dg.as_slice(), &an_h].concat();
    let numeric = [fd_b, fd_f, fd_g, fd_h].concat();
    rel_err(&analytic, &numeric)
}

pub fn random_env(rng: &mut ChaCha8Rng) -> EnvironmentInfo<f64> {
    EnvironmentInfo::from_semi_axes(
        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        rng.random_range(0.15..0.6),
        rng.random_range(0.15..0.6),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .unwrap()
}

/// Random state outside the obstacle, with bounded derivative entries.
pub fn random_safe_state(rng: &mut ChaCha8Rng, sys: &LinearCtrlAffineSystem<f64>, c: &EcbfCascade<f64>) -> Vec<f64> {
    loop {
        let x = uniform_vec(rng, sys.n(), -2.0, 2.0);
        if c.h(&x) > 0.02 {
            return x;
        }
    }
}

/// Largest `|alpha_rhs(p, x) − K_α(p)·η_b(x)|` over `draws` random draws.
pub fn operator_identity_error(r: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let sys = integrator_chain::<f64>(2, r);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let c = EcbfCascade::for_obstacle(&random_env(&mut rng), &sys).unwrap();
        let x = uniform_vec(&mut rng, sys.n(), -1.0, 1.0);
        let poles = uniform_vec(&mut rng, r, 0.05, 5.0);
        let k = poles_to_kalpha(&poles);
        let eta = c.eta_b(&x);
        let direct: f64 = k.iter().zip(&eta).map(|(a, b)| a * b).sum();
        worst = worst.max((alpha_rhs(&c, &poles, &x) - direct).abs());
    }
    worst
}

/// Micro configuration for end-to-end gradient checks: 10 steps, 2 rollouts
/// starting next to the obstacle so the filter is active, a small network and
/// no pole cap (so no pole is pinned).
pub fn micro_setup() -> (TrainContext<f64>, AlphaNet<f64>, Vec<Scenario<f64>>) {
    let mut cfg = TrainConfig::default();
    cfg.horizon = 0.2;
    cfg.batch = 2;
    cfg.max_pole_dt = None;
    cfg.threads = 1;
    let ctx = TrainContext::<f64>::new(cfg).unwrap();
    let sys = &ctx.sys;
    let scenarios = vec![
        Scenario {
            envs: vec![EnvironmentInfo::circle([0.0, 0.0], 0.35).unwrap()],
            x0: sys.state_at([-0.4, 0.03]),
        },
        Scenario {
            envs: vec![EnvironmentInfo::from_semi_axes([0.1, -0.1], 0.4, 0.2, 0.5).unwrap()],
            x0: sys.state_at([-0.3, -0.05]),
        },
    ];
    let net = AlphaNet::with_sizes(&[5 + sys.n(), 8, 8, sys.order()], 11);
    (ctx, net, scenarios)
}

/// Worst relative error between the batch gradient and central differences
/// of the batch loss at `indices` (flattened parameter positions), plus the
/// number of entries with a non-negligible gradient.
pub fn end_to_end_fd(ctx: &TrainContext<f64>, net: &AlphaNet<f64>, scenarios: &[Scenario<f64>], indices: &[usize]) -> (f64, usize) {
    let (_, grad) = ctx.batch_loss_grad(net, scenarios).unwrap();
    let flat = net.params.flatten();
    let loss_at = |theta: &[f64]| {
        let mut n = net.clone();
        n.params = net.params.unflatten(theta);
        ctx.batch_loss_grad(&n, scenarios).unwrap().0
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for &i in indices {
        let h = 1e-5;
        let mut t = flat.clone();
        t[i] = flat[i] + h;
        let fp = loss_at(&t);
        t[i] = flat[i] - h;
        let fm = loss_at(&t);
        let fd = (fp - fm) / (2.0 * h);
        if grad[i].abs().max(fd.abs()) > 1e-8 {
            checked += 1;
            worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()));
        }
    }
    (worst, checked)
}

/// Evaluates a closure on a fresh recording tape and returns the value and
/// gradient with respect to the single vector leaf.
pub fn tape_value_grad(x: &[f64], f: impl Fn(&mut Tape<f64>, diffcbf::autodiff::NodeId) -> diffcbf::autodiff::NodeId) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let leaf = tape.leaf(Mat::column(x.to_vec()));
    let out = f(&mut tape, leaf);
    let v = tape.scalar(out);
    let g = tape.backward(out).unwrap();
    (v, g.get_or_zeros(leaf, (x.len(), 1)).into_vec())
}
