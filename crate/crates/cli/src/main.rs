//! `diffcbf`: train, evaluate and benchmark learned ECBF pole networks.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use diffcbf::alpha_net::AlphaNet;
use diffcbf::experiments::{self, BenchmarkReport};
use diffcbf::export::{self, SceneTrace};
use diffcbf::training::{evaluate_one, train, EvalRecord, PoleSource, ScenarioKind, TrainContext, TrainError};
use serde::Serialize;
use thiserror::Error;

use config::{Mode, Overrides, Resolved, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Checkpoint { .. } => 2,
            CliError::Train(e) if e.is_numerical() => 3,
            CliError::Train(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "diffcbf", version, about = "Learned exponential CBF poles through a differentiable QP safety filter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// double_integrator, quadruple_integrator or multi_obstacle.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<ScenarioKind>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pole scale factor (eval: scale the learned poles; ablate: replaces the factor list).
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an α-net and write checkpoint, metrics and training curve.
    Train(Common),
    /// Evaluate a checkpoint and export trajectories.
    Eval(Common),
    /// Learned poles against random valid poles.
    Benchmark(Common),
    /// Scale and fixed-obstacle ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Run only one ablation.
        #[arg(long, value_enum)]
        kind: Option<AblationKind>,
    },
    /// Motivating example: poles tuned for one obstacle used on another.
    Demo(Common),
    /// Dispatch on the `mode` key of the config file.
    Run(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum AblationKind {
    Scale,
    FixedObstacle,
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown scenario `{s}`"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn resolve(common: &Common) -> Result<Resolved, CliError> {
    let file = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    file.resolve(&Overrides {
        seed: common.seed,
        scenario: common.scenario,
        out: common.out.clone(),
        checkpoint: common.checkpoint.clone(),
        scale: common.scale,
    })
}

fn run(cmd: Command) -> Result<(), CliError> {
    let (common, mode, kind) = match cmd {
        Command::Train(c) => (c, Some(Mode::Train), None),
        Command::Eval(c) => (c, Some(Mode::Eval), None),
        Command::Benchmark(c) => (c, Some(Mode::Benchmark), None),
        Command::Ablate { common, kind } => (common, None, Some(kind)),
        Command::Demo(c) => (c, Some(Mode::DemoMotivating), None),
        Command::Run(c) => (c, None, None),
    };
    let cfg = resolve(&common)?;
    let mode = match (mode, kind) {
        (Some(m), _) => m,
        (None, Some(Some(AblationKind::Scale))) => Mode::AblateScale,
        (None, Some(Some(AblationKind::FixedObstacle))) => Mode::AblateFixedObs,
        (None, Some(None)) => return cmd_ablate(&cfg, true, true),
        (None, None) => cfg.mode.ok_or_else(|| CliError::Config("`run` needs a `mode` key in the config".into()))?,
    };
    if let Some(m) = cfg.mode.filter(|m| *m != mode) {
        log::warn!("config mode {m:?} ignored in favour of the command line");
    }
    match mode {
        Mode::Train => cmd_train(&cfg).map(|_| ()),
        Mode::Eval => cmd_eval(&cfg),
        Mode::Benchmark => cmd_benchmark(&cfg),
        Mode::AblateScale => cmd_ablate(&cfg, true, false),
        Mode::AblateFixedObs => cmd_ablate(&cfg, false, true),
        Mode::DemoMotivating => cmd_demo(&cfg),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    log::info!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    config: &'a Resolved,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, cfg: &Resolved, body: T) -> Result<(), CliError> {
    write(path, &export::to_json(&Artifact { config: cfg, body })?)
}

fn initial_net(cfg: &Resolved) -> AlphaNet<f64> {
    let sys = cfg.train.scenario.system::<f64>();
    AlphaNet::new(sys.n(), sys.order(), cfg.train.seed)
}

fn load_checkpoint(path: &Path) -> Result<AlphaNet<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    AlphaNet::from_json(&text).map_err(|e| CliError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn check_dims(net: &AlphaNet<f64>, cfg: &Resolved, path: &Path) -> Result<(), CliError> {
    let sys = experiments::training_config(&cfg.train).scenario.system::<f64>();
    if net.input_dim() != 5 + sys.n() || net.output_dim() != sys.order() {
        return Err(CliError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("network shape {}→{} does not fit scenario {:?}", net.input_dim(), net.output_dim(), cfg.scenario()),
        });
    }
    Ok(())
}

/// Trains with `cfg` (mapped to its training scenario) and writes checkpoint,
/// metrics and curve into `dir`.
fn train_into(cfg: &Resolved, dir: &Path) -> Result<AlphaNet<f64>, CliError> {
    let tcfg = experiments::training_config(&cfg.train);
    if tcfg.scenario != cfg.scenario() {
        log::info!("{:?} uses a net trained on single obstacles ({:?})", cfg.scenario(), tcfg.scenario);
    }
    let sys = tcfg.scenario.system::<f64>();
    let init = AlphaNet::new(sys.n(), sys.order(), tcfg.seed);
    let start = Instant::now();
    let outcome = match train(&tcfg, init, |m| {
        log::info!("iter {:>4}  loss {:.4}  slack {:.3e}  min h {:.3e}", m.iter, m.mean_loss, m.mean_slack, m.min_h)
    }) {
        Ok(o) => o,
        Err(TrainError::NonFinite { what, iter, snapshot }) => {
            write(&dir.join("snapshot.json"), &export::to_json(&*snapshot)?)?;
            return Err(TrainError::NonFinite { what, iter, snapshot }.into());
        }
        Err(e) => return Err(e.into()),
    };
    log::info!("trained {} iterations in {:.1} s", tcfg.iterations, start.elapsed().as_secs_f64());
    write(&dir.join("checkpoint.json"), &outcome.net.to_json().map_err(TrainError::from)?)?;
    write(&dir.join("metrics.jsonl"), &export::metrics_jsonl(&outcome.metrics)?)?;
    write(&dir.join("training_curve.svg"), &export::training_curve_svg(&outcome.metrics))?;
    write_json(&dir.join("config.json"), cfg, ())?;
    Ok(outcome.net)
}

fn cmd_train(cfg: &Resolved) -> Result<AlphaNet<f64>, CliError> {
    train_into(cfg, &cfg.out)
}

/// The configured checkpoint, or a freshly trained net when none is set.
fn net_for(cfg: &Resolved, dir: &Path) -> Result<AlphaNet<f64>, CliError> {
    match &cfg.checkpoint {
        Some(p) => {
            let net = load_checkpoint(p)?;
            check_dims(&net, cfg, p)?;
            Ok(net)
        }
        None => train_into(cfg, dir),
    }
}

#[derive(Serialize)]
struct EvalBody<'a> {
    scenario: ScenarioKind,
    poles: String,
    summary: experiments::MethodSummary,
    records: &'a [EvalRecord],
}

fn cmd_eval(cfg: &Resolved) -> Result<(), CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("eval needs a checkpoint (--checkpoint or paths.checkpoint)".into()))?;
    let net = load_checkpoint(path)?;
    check_dims(&net, cfg, path)?;
    let ctx = TrainContext::<f64>::new(cfg.train.clone())?;
    let scenarios = experiments::evaluation_scenarios(&cfg.train, cfg.eval.scenarios, cfg.eval.seed)?;
    let source = match cfg.scale {
        Some(f) => PoleSource::Scaled(&net, f),
        None => PoleSource::Learned(&net),
    };
    let label = source.label();
    let cmp = experiments::compare(&ctx, &label, &source, &scenarios, cfg.eval.subtask_size)?;
    for (i, sc) in scenarios.iter().take(cfg.eval.export).enumerate() {
        let (_, traj) = evaluate_one(&ctx, &source, sc, i)?;
        write(&cfg.out.join(format!("trajectory_{i:03}.csv")), &traj.to_csv())?;
        let trace = SceneTrace::from_trajectory(&label, &ctx.sys, &traj);
        let svg = export::scene_svg(&sc.envs, &[trace], ctx.sys.position(&sc.x0), cfg.train.goal);
        write(&cfg.out.join(format!("trajectory_{i:03}.svg")), &svg)?;
    }
    let s = &cmp.summary;
    println!(
        "{label}: loss {:.4} ± {:.4} over {} scenarios, min h {:.3e}, violations {}",
        s.loss.mean,
        s.loss.std,
        scenarios.len(),
        s.min_h,
        s.violations
    );
    write_json(
        &cfg.out.join("eval.json"),
        cfg,
        EvalBody {
            scenario: cfg.scenario(),
            poles: label.clone(),
            summary: cmp.summary.clone(),
            records: &cmp.records,
        },
    )
}

#[derive(Serialize)]
struct BenchmarkBody<'a> {
    reports: &'a [BenchmarkReport],
}

fn cmd_benchmark(cfg: &Resolved) -> Result<(), CliError> {
    let kinds: Vec<ScenarioKind> = if cfg.scenario_explicit {
        vec![cfg.scenario()]
    } else if cfg.checkpoint.is_some() {
        return Err(CliError::Config("a checkpoint benchmark needs an explicit scenario".into()));
    } else {
        vec![ScenarioKind::DoubleIntegrator, ScenarioKind::QuadrupleIntegrator, ScenarioKind::MultiObstacle]
    };
    let mut reports = Vec::new();
    let mut single_obstacle_net: Option<AlphaNet<f64>> = None;
    for kind in kinds {
        let run = cfg.with_scenario(kind);
        let dir = cfg.out.join(format!("{kind:?}").to_lowercase());
        let net = match (&single_obstacle_net, kind) {
            (Some(n), ScenarioKind::MultiObstacle) if cfg.checkpoint.is_none() => n.clone(),
            _ => net_for(&run, &dir)?,
        };
        if kind == ScenarioKind::DoubleIntegrator {
            single_obstacle_net = Some(net.clone());
        }
        let ctx = TrainContext::<f64>::new(run.train.clone())?;
        let scenarios = experiments::evaluation_scenarios(&run.train, cfg.eval.scenarios, cfg.eval.seed)?;
        let report = experiments::benchmark(&ctx, &net, &scenarios, cfg.eval.random_seed)?;
        log::info!("{kind:?} done");
        reports.push(report);
    }
    let table = experiments::render_table(&reports);
    print!("{table}");
    write(&cfg.out.join("benchmark.txt"), &table)?;
    write_json(&cfg.out.join("benchmark.json"), cfg, BenchmarkBody { reports: &reports })
}

#[derive(Serialize)]
struct AblationBody {
    scenario: ScenarioKind,
    reports: Vec<experiments::AblationReport>,
}

fn cmd_ablate(cfg: &Resolved, scale: bool, fixed: bool) -> Result<(), CliError> {
    let net = net_for(cfg, &cfg.out)?;
    let ctx = TrainContext::<f64>::new(cfg.train.clone())?;
    let scenarios = experiments::evaluation_scenarios(&cfg.train, cfg.eval.scenarios, cfg.eval.seed)?;
    let mut reports = Vec::new();
    if scale {
        let factors = cfg.scale.map_or_else(|| cfg.ablate.factors.clone(), |f| vec![f]);
        reports.push(experiments::ablate_scale(&ctx, &net, &factors, &scenarios)?);
    }
    if fixed {
        let tcfg = experiments::training_config(&cfg.train);
        let obstacle = cfg.ablate.fixed_env.unwrap_or_else(|| experiments::nominal_obstacle(&tcfg));
        let (report, fixed_net) = experiments::ablate_fixed_obstacle(&tcfg, &net, initial_net(cfg), obstacle, &scenarios)?;
        write(&cfg.out.join("fixed_obstacle_checkpoint.json"), &fixed_net.to_json().map_err(TrainError::from)?)?;
        reports.push(report);
    }
    for r in &reports {
        for m in &r.methods {
            println!("{:<16} {:<24} loss {:.4} ± {:.4}  min h {:.3e}", r.kind, m.label, m.loss.mean, m.loss.std, m.min_h);
        }
    }
    write_json(&cfg.out.join("ablation.json"), cfg, AblationBody { scenario: cfg.scenario(), reports })
}

fn cmd_demo(cfg: &Resolved) -> Result<(), CliError> {
    let ctx = TrainContext::<f64>::new(cfg.train.clone())?;
    let (report, trajs) = experiments::motivating_demo(&ctx, &cfg.demo)?;
    let env = |v: [f64; 5]| diffcbf::barrier::EnvironmentInfo::from_vector(v).map_err(TrainError::from);
    let (e1, e2) = (env(report.e1)?, env(report.e2)?);
    let traces: Vec<SceneTrace> = report.runs.iter().zip(&trajs).map(|(r, t)| SceneTrace::from_trajectory(&r.label, &ctx.sys, t)).collect();
    let mut traces = traces.into_iter();
    let start = cfg.demo.start;
    let (t0, t1, t2, t3) = (traces.next().unwrap(), traces.next().unwrap(), traces.next().unwrap(), traces.next().unwrap());
    write(&cfg.out.join("demo_e1.svg"), &export::scene_svg(&[e1], &[t0, t1], start, cfg.train.goal))?;
    write(&cfg.out.join("demo_e2.svg"), &export::scene_svg(&[e2], &[t2, t3], start, cfg.train.goal))?;
    for (r, t) in report.runs.iter().zip(&trajs) {
        write(&cfg.out.join(format!("demo_{}.csv", r.label)), &t.to_csv())?;
    }
    println!(
        "E1 poles {:?}, E2 poles {:?}: path in E2 with E1's poles is {:.1}% longer; all safe: {}",
        report.poles_e1,
        report.poles_e2,
        100.0 * (report.path_ratio - 1.0),
        report.all_safe
    );
    write_json(&cfg.out.join("demo.json"), cfg, &report)
}
