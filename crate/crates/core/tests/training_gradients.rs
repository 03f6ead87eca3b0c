mod common;

use common::{end_to_end_fd, micro_setup, rng};
use diffcbf::alpha_net::AlphaNet;
use diffcbf::dynamics::{RolloutStatus, Trajectory};
use diffcbf::training::{loss_value, train, ScenarioKind, TrainConfig};
use rand::Rng;

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let (ctx, net, scenarios) = micro_setup();
    let n = net.params.n_params();
    let mut r = rng(30);
    let mut idx: Vec<usize> = (0..40).map(|_| r.random_range(0..n)).collect();
    // the output layer always carries gradient when the filter is active
    idx.extend(n - 20..n);
    let (err, checked) = end_to_end_fd(&ctx, &net, &scenarios, &idx);
    assert!(checked >= 20, "only {checked} non-zero gradient entries");
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn batch_gradient_is_the_mean_of_rollout_gradients() {
    let (ctx, net, scenarios) = micro_setup();
    let (loss, grad) = ctx.batch_loss_grad(&net, &scenarios).unwrap();
    let per: Vec<_> = scenarios.iter().enumerate().map(|(i, s)| ctx.rollout_grad(&net, s, i).unwrap()).collect();
    let mean_loss = per.iter().map(|p| p.loss).sum::<f64>() / per.len() as f64;
    assert!((loss - mean_loss).abs() <= 1e-14 * mean_loss.abs());
    for (k, g) in grad.iter().enumerate() {
        let m = per.iter().map(|p| p.grad[k]).sum::<f64>() / per.len() as f64;
        assert!((g - m).abs() <= 1e-14 * (1.0 + m.abs()));
    }
    assert!(per.iter().all(|p| p.mean_slack >= 0.0));
}

fn tiny_config(threads: usize) -> TrainConfig {
    let mut cfg = TrainConfig::for_scenario(ScenarioKind::DoubleIntegrator);
    cfg.iterations = 3;
    cfg.batch = 4;
    // long enough to reach the obstacle, so the filter carries gradient
    cfg.horizon = 2.0;
    cfg.threads = threads;
    cfg
}

#[test]
fn training_is_bitwise_deterministic() {
    let run = |threads| {
        let cfg = tiny_config(threads);
        let sys = cfg.scenario.system::<f64>();
        train(&cfg, AlphaNet::<f64>::new(sys.n(), sys.order(), cfg.seed), |_| {}).unwrap()
    };
    let bits = |n: &AlphaNet<f64>| n.params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let (a, b, c) = (run(1), run(1), run(2));
    for other in [&b, &c] {
        assert_eq!(bits(&a.net), bits(&other.net));
        assert!(a.metrics.iter().zip(&other.metrics).all(|(x, y)| x.same_values(y)));
    }
    assert_eq!(a.metrics.len(), 3);
    assert_ne!(a.net, AlphaNet::new(4, 2, 0), "parameters moved");
}

#[test]
fn different_seeds_sample_different_batches() {
    let sys = ScenarioKind::DoubleIntegrator.system::<f64>();
    let mut cfg = tiny_config(1);
    let a = cfg.batch_scenarios(&sys, 0).unwrap();
    let b = cfg.batch_scenarios(&sys, 1).unwrap();
    cfg.seed = 1;
    let c = cfg.batch_scenarios(&sys, 0).unwrap();
    assert_ne!(a[0].x0, b[0].x0);
    assert_ne!(a[0].x0, c[0].x0);
    assert_eq!(a[0].x0, tiny_config(1).batch_scenarios(&sys, 0).unwrap()[0].x0);
}

fn trajectory(states: Vec<Vec<f64>>, slacks: Vec<Vec<f64>>) -> Trajectory<f64> {
    Trajectory {
        dt: 0.02,
        controls: vec![vec![0.0, 0.0]; states.len() - 1],
        barrier: vec![vec![1.0]; states.len()],
        states,
        slacks,
        status: RolloutStatus::Completed,
        fallback_steps: Vec::new(),
        slack_mode: true,
        state_nodes: Vec::new(),
        slack_nodes: Vec::new(),
    }
}

#[test]
fn loss_examples() {
    let goal = vec![1.0, 0.0, 0.0, 0.0];
    let at_goal = trajectory(vec![goal.clone(); 3], vec![vec![0.0]; 2]);
    assert_eq!(loss_value(&at_goal, &goal, 10.0, None), 0.0);
    let off = trajectory(vec![vec![0.0, 0.0, 0.0, 0.0], goal.clone()], vec![vec![0.0]]);
    assert_eq!(loss_value(&off, &goal, 10.0, None), 1.0);
    let slack = trajectory(vec![goal.clone(); 2], vec![vec![0.1]]);
    assert!((loss_value(&slack, &goal, 10.0, None) - 0.1).abs() < 1e-15);
    // velocity error only counts under the full-state loss
    let moving = trajectory(vec![vec![1.0, 2.0, 0.0, 0.0]], vec![]);
    let sys = ScenarioKind::DoubleIntegrator.system::<f64>();
    assert_eq!(loss_value(&moving, &goal, 10.0, None), 4.0);
    assert_eq!(loss_value(&moving, &goal, 10.0, Some(&sys)), 0.0);
}
