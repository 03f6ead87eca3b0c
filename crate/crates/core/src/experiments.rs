//! Benchmark, ablation and motivating-example drivers (double precision).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alpha_net::AlphaNet;
use crate::barrier::EnvironmentInfo;
use crate::dynamics::Trajectory;
use crate::training::{evaluate, evaluate_one, sample_scenarios, summarize, train, EvalRecord, PoleSource, Scenario, ScenarioKind, Summary, TrainConfig, TrainContext, TrainError};

pub const SUBTASKS: usize = 4;
pub const SUBTASK_SIZE: usize = 50;
/// Width of the uniform offset added to each bound by the random baseline.
pub const RANDOM_SPREAD: f64 = 3.0;
pub const SAFETY_TOL: f64 = 1e-6;

/// Evaluation scenarios drawn from the configured distributions (never the
/// training stream, and never a fixed obstacle).
pub fn evaluation_scenarios(cfg: &TrainConfig, count: usize, seed: u64) -> Result<Vec<Scenario<f64>>, TrainError> {
    let sys = cfg.scenario.system::<f64>();
    sample_scenarios(&sys, &cfg.env, &cfg.start, cfg.goal, None, count, seed)
}

/// Configuration the α-net is trained with for a given evaluation setup: the
/// multi-obstacle scenario reuses a double-integrator net trained on single
/// obstacles.
pub fn training_config(cfg: &TrainConfig) -> TrainConfig {
    let mut t = cfg.clone();
    if cfg.scenario == ScenarioKind::MultiObstacle {
        t.scenario = ScenarioKind::DoubleIntegrator;
        t.env = ScenarioKind::DoubleIntegrator.default_env();
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub label: String,
    pub loss: Summary,
    pub min_h: f64,
    pub violations: usize,
    pub fallback_steps: usize,
    pub incomplete: usize,
    pub mean_path_length: f64,
    pub mean_control_effort: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub summary: MethodSummary,
    pub records: Vec<EvalRecord>,
}

pub fn compare(ctx: &TrainContext<f64>, label: &str, source: &PoleSource<'_, f64>, scenarios: &[Scenario<f64>], subtask_size: usize) -> Result<Comparison, TrainError> {
    let records = evaluate(ctx, source, scenarios)?;
    let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let n = records.len().max(1) as f64;
    let summary = MethodSummary {
        label: label.to_string(),
        loss: summarize(&losses, subtask_size),
        min_h: records.iter().map(|r| r.min_h).fold(f64::INFINITY, f64::min),
        violations: records.iter().filter(|r| r.min_h < -SAFETY_TOL).count(),
        fallback_steps: records.iter().map(|r| r.fallback_steps).sum(),
        incomplete: records.iter().filter(|r| !r.complete).count(),
        mean_path_length: records.iter().map(|r| r.path_length).sum::<f64>() / n,
        mean_control_effort: records.iter().map(|r| r.control_effort).sum::<f64>() / n,
    };
    Ok(Comparison { summary, records })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenario: crate::training::ScenarioKind,
    pub n_scenarios: usize,
    pub subtask_size: usize,
    pub methods: Vec<MethodSummary>,
}

impl BenchmarkReport {
    pub fn method(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.label == label)
    }
}

/// Learned poles against random valid poles on the same scenarios.
pub fn benchmark(ctx: &TrainContext<f64>, net: &AlphaNet<f64>, scenarios: &[Scenario<f64>], random_seed: u64) -> Result<BenchmarkReport, TrainError> {
    let learned = compare(ctx, "learned", &PoleSource::Learned(net), scenarios, SUBTASK_SIZE)?;
    let random = PoleSource::RandomValid {
        seed: random_seed,
        spread: RANDOM_SPREAD,
        epsilon: net.epsilon,
    };
    let random = compare(ctx, "random_valid", &random, scenarios, SUBTASK_SIZE)?;
    Ok(BenchmarkReport {
        scenario: ctx.cfg.scenario,
        n_scenarios: scenarios.len(),
        subtask_size: SUBTASK_SIZE,
        methods: vec![learned.summary, random.summary],
    })
}

/// Plain-text table of several reports.
pub fn render_table(reports: &[BenchmarkReport]) -> String {
    let mut out = format!(
        "{:<22} {:<14} {:>22} {:>12} {:>10} {:>9}\n",
        "scenario", "method", "loss (mean ± std)", "min h", "violations", "fallback"
    );
    for r in reports {
        for m in &r.methods {
            out.push_str(&format!(
                "{:<22} {:<14} {:>22} {:>12.3e} {:>10} {:>9}\n",
                format!("{:?}", r.scenario),
                m.label,
                format!("{:.4} ± {:.4}", m.loss.mean, m.loss.std),
                m.min_h,
                m.violations,
                m.fallback_steps
            ));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: String,
    pub n_scenarios: usize,
    pub methods: Vec<MethodSummary>,
    /// Scaled poles lifted back to their bounds, per factor.
    pub clamped: Vec<(f64, usize)>,
}

/// Learned poles against the same poles multiplied by each factor.
pub fn ablate_scale(ctx: &TrainContext<f64>, net: &AlphaNet<f64>, factors: &[f64], scenarios: &[Scenario<f64>]) -> Result<AblationReport, TrainError> {
    if let Some(f) = factors.iter().find(|f| !(**f > 0.0)) {
        return Err(TrainError::Config(format!("scale factor must be positive, got {f}")));
    }
    let mut methods = vec![compare(ctx, "learned", &PoleSource::Learned(net), scenarios, SUBTASK_SIZE)?.summary];
    let mut clamped = Vec::new();
    for &f in factors {
        let c = compare(ctx, &format!("scaled_{f}"), &PoleSource::Scaled(net, f), scenarios, SUBTASK_SIZE)?;
        let n = c.records.iter().map(|r| r.clamped).sum();
        if n > 0 {
            log::info!("scale {f}: {n} poles lifted to their bounds");
        }
        clamped.push((f, n));
        methods.push(c.summary);
    }
    Ok(AblationReport {
        kind: "scale".into(),
        n_scenarios: scenarios.len(),
        methods,
        clamped,
    })
}

/// Nominal obstacle used by the fixed-obstacle ablation: the mean of the
/// environment distribution's first obstacle.
pub fn nominal_obstacle(cfg: &TrainConfig) -> [f64; 5] {
    let c = cfg.env.centers[0];
    let l = 1.0 / (cfg.env.axis_mean * cfg.env.axis_mean);
    [c[0], c[1], l, l, 0.0]
}

/// Trains a second network on a single frozen obstacle (same seed and
/// initialization) and compares both on novel environments.
pub fn ablate_fixed_obstacle(cfg: &TrainConfig, net: &AlphaNet<f64>, init: AlphaNet<f64>, fixed_env: [f64; 5], scenarios: &[Scenario<f64>]) -> Result<(AblationReport, AlphaNet<f64>), TrainError> {
    let mut fixed_cfg = cfg.clone();
    fixed_cfg.fixed_env = Some(fixed_env);
    let fixed = train(&fixed_cfg, init, |_| {})?.net;
    let ctx = TrainContext::<f64>::new(cfg.clone())?;
    let methods = vec![
        compare(&ctx, "environment_conditioned", &PoleSource::Learned(net), scenarios, SUBTASK_SIZE)?.summary,
        compare(&ctx, "fixed_obstacle", &PoleSource::Learned(&fixed), scenarios, SUBTASK_SIZE)?.summary,
    ];
    Ok((
        AblationReport {
            kind: "fixed_obstacle".into(),
            n_scenarios: scenarios.len(),
            methods,
            clamped: Vec::new(),
        },
        fixed,
    ))
}

/// Grid search behind the motivating example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub candidates: usize,
    pub seed: u64,
    pub grid: Vec<f64>,
    pub start: [f64; 2],
    pub center_x: [f64; 2],
    pub center_y: [f64; 2],
    pub axis_range: [f64; 2],
    pub theta_range: [f64; 2],
    /// Factor applied to the tuned poles to obtain a de-tuned comparison.
    pub detune: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            candidates: 120,
            seed: 1,
            grid: vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 24.0],
            start: [-1.5, 0.0],
            center_x: [-1.0, 0.6],
            center_y: [-0.4, 0.4],
            axis_range: [0.15, 0.6],
            theta_range: [-1.5, 1.5],
            detune: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoRun {
    pub label: String,
    pub env: [f64; 5],
    pub poles: Vec<f64>,
    pub loss: f64,
    pub path_length: f64,
    pub min_h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoReport {
    pub e1: [f64; 5],
    pub e2: [f64; 5],
    pub poles_e1: Vec<f64>,
    pub poles_e2: Vec<f64>,
    /// Path length in E2 with E1's poles over path length with E2's poles.
    pub path_ratio: f64,
    pub all_safe: bool,
    pub detuned_longer_in_e1: bool,
    pub runs: Vec<DemoRun>,
}

fn pole_candidates(grid: &[f64], r: usize) -> Vec<Vec<f64>> {
    if grid.len().pow(r as u32) <= 400 {
        let mut out = vec![Vec::new()];
        for _ in 0..r {
            out = out.into_iter().flat_map(|p| grid.iter().map(move |&g| [p.clone(), vec![g]].concat())).collect();
        }
        out
    } else {
        grid.iter().map(|&g| vec![g; r]).collect()
    }
}

/// Finds two obstacles where poles tuned (by loss) for the first give a longer
/// path in the second than the second's own tuned poles. Returns the report
/// and the trajectories `[E1 tuned, E1 de-tuned, E2 with E1's poles, E2 tuned]`.
pub fn motivating_demo(ctx: &TrainContext<f64>, demo: &DemoConfig) -> Result<(DemoReport, Vec<Trajectory<f64>>), TrainError> {
    if demo.candidates < 2 || demo.grid.is_empty() || demo.grid.iter().any(|g| !(*g > 0.0)) || !(demo.detune > 0.0) {
        return Err(TrainError::Config("demo needs two candidates, a positive grid and a positive detune factor".into()));
    }
    let sys = &ctx.sys;
    let start = [demo.start[0], demo.start[1]];
    let x0 = sys.state_at(start);
    let goal = ctx.cfg.goal;
    let mut rng = ChaCha8Rng::seed_from_u64(demo.seed);
    let mut envs = Vec::with_capacity(demo.candidates);
    let mut tries = 0;
    while envs.len() < demo.candidates {
        tries += 1;
        if tries > 1000 * demo.candidates {
            return Err(TrainError::Sampling("demo candidates keep covering start or goal"));
        }
        let e = EnvironmentInfo::from_semi_axes(
            [rng.random_range(demo.center_x[0]..=demo.center_x[1]), rng.random_range(demo.center_y[0]..=demo.center_y[1])],
            rng.random_range(demo.axis_range[0]..=demo.axis_range[1]),
            rng.random_range(demo.axis_range[0]..=demo.axis_range[1]),
            rng.random_range(demo.theta_range[0]..=demo.theta_range[1]),
        )?;
        if e.barrier_at(goal) > 0.0 && e.barrier_at(start) > 0.3 {
            envs.push(e);
        }
    }
    let grid = pole_candidates(&demo.grid, sys.order());
    let run = |e: &EnvironmentInfo<f64>, poles: &[f64]| {
        let sc = Scenario { envs: vec![*e], x0: x0.clone() };
        evaluate_one(ctx, &PoleSource::Fixed(poles.to_vec()), &sc, 0)
    };
    let table: Vec<Vec<(f64, f64)>> = envs
        .par_iter()
        .map(|e| grid.iter().map(|p| run(e, p).map(|(r, _)| (r.loss, r.path_length))).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;
    let tuned: Vec<usize> = table.iter().map(|row| (0..row.len()).min_by(|&a, &b| row[a].0.total_cmp(&row[b].0)).expect("non-empty grid")).collect();
    let mut best = (f64::NEG_INFINITY, 0, 1);
    for i in 0..envs.len() {
        for j in 0..envs.len() {
            if i != j {
                let ratio = table[j][tuned[i]].1 / table[j][tuned[j]].1;
                if ratio > best.0 {
                    best = (ratio, i, j);
                }
            }
        }
    }
    let (ratio, i, j) = best;
    let (e1, e2) = (&envs[i], &envs[j]);
    let (k1, k2) = (grid[tuned[i]].clone(), grid[tuned[j]].clone());
    let detuned: Vec<f64> = k1.iter().map(|p| p * demo.detune).collect();
    let cases = [("e1_tuned", e1, &k1), ("e1_detuned", e1, &detuned), ("e2_with_e1_poles", e2, &k1), ("e2_tuned", e2, &k2)];
    let mut runs = Vec::new();
    let mut trajs = Vec::new();
    for (label, e, k) in cases {
        let (rec, traj) = run(e, k)?;
        runs.push(DemoRun {
            label: label.into(),
            env: e.to_vector(),
            poles: k.clone(),
            loss: rec.loss,
            path_length: rec.path_length,
            min_h: rec.min_h,
        });
        trajs.push(traj);
    }
    let report = DemoReport {
        e1: e1.to_vector(),
        e2: e2.to_vector(),
        poles_e1: k1,
        poles_e2: k2,
        path_ratio: ratio,
        all_safe: runs.iter().all(|r| r.min_h >= -SAFETY_TOL),
        detuned_longer_in_e1: runs[1].path_length > runs[0].path_length,
        runs,
    };
    Ok((report, trajs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_grid_shapes() {
        assert_eq!(pole_candidates(&[1.0, 2.0], 2).len(), 4);
        assert_eq!(pole_candidates(&[1.0, 2.0, 3.0, 4.0, 5.0], 4).len(), 5);
    }

    #[test]
    fn render_lists_every_method() {
        let s = Summary { mean: 1.0, std: 0.5, subtasks: 4 };
        let m = MethodSummary {
            label: "learned".into(),
            loss: s,
            min_h: 0.1,
            violations: 0,
            fallback_steps: 0,
            incomplete: 0,
            mean_path_length: 2.0,
            mean_control_effort: 3.0,
        };
        let r = BenchmarkReport {
            scenario: crate::training::ScenarioKind::DoubleIntegrator,
            n_scenarios: 200,
            subtask_size: 50,
            methods: vec![m.clone(), MethodSummary { label: "random_valid".into(), ..m }],
        };
        let t = render_table(&[r]);
        assert!(t.contains("learned") && t.contains("random_valid") && t.contains("1.0000 ± 0.5000"));
    }
}
