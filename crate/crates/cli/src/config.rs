use std::path::{Path, PathBuf};

use diffcbf::experiments::DemoConfig;
use diffcbf::training::{ScenarioKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
    Benchmark,
    AblateFixedObs,
    AblateScale,
    DemoMotivating,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub scenarios: usize,
    pub subtask_size: usize,
    pub seed: u64,
    pub random_seed: u64,
    /// Trajectories written as CSV/SVG by `eval`.
    pub export: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenarios: 200,
            subtask_size: 50,
            seed: 4242,
            random_seed: 7,
            export: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub factors: Vec<f64>,
    /// Obstacle frozen during fixed-obstacle training; the mean obstacle of the
    /// environment distribution when unset.
    pub fixed_env: Option<[f64; 5]>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            factors: vec![3.0, 0.5],
            fixed_env: None,
        }
    }
}

/// Config file as written by the user. `[train]` holds overrides applied on top
/// of the scenario's defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub scenario: Option<ScenarioKind>,
    pub seed: Option<u64>,
    pub paths: Paths,
    pub train: toml::Table,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub demo: DemoConfig,
}

/// Command-line values taking precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scenario: Option<ScenarioKind>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scale: Option<f64>,
}

/// Fully resolved configuration, embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub mode: Option<Mode>,
    /// Whether the scenario was chosen explicitly (benchmark runs all three
    /// otherwise).
    pub scenario_explicit: bool,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub scale: Option<f64>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub demo: DemoConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn resolve(self, ov: &Overrides) -> Result<Resolved, CliError> {
        if self.train.contains_key("scenario") {
            return Err(CliError::Config("set `scenario` at the top level, not under [train]".into()));
        }
        let scenario = ov.scenario.or(self.scenario);
        let mut train = train_config(scenario.unwrap_or(ScenarioKind::DoubleIntegrator), &self.train)?;
        if let Some(seed) = ov.seed.or(self.seed) {
            train.seed = seed;
        }
        train.validate()?;
        if self.eval.scenarios == 0 || self.eval.subtask_size == 0 {
            return Err(CliError::Config("eval.scenarios and eval.subtask_size must be positive".into()));
        }
        if let Some(f) = self.ablate.factors.iter().chain(&ov.scale).find(|f| !(**f > 0.0)) {
            return Err(CliError::Config(format!("scale factor must be positive, got {f}")));
        }
        Ok(Resolved {
            mode: self.mode,
            scenario_explicit: scenario.is_some(),
            out: ov.out.clone().or(self.paths.out).unwrap_or_else(|| PathBuf::from("runs")),
            checkpoint: ov.checkpoint.clone().or(self.paths.checkpoint),
            scale: ov.scale,
            train,
            eval: self.eval,
            ablate: self.ablate,
            demo: self.demo,
        })
    }
}

/// Scenario defaults with `overrides` merged in (nested tables merge key by
/// key). Unknown keys are rejected.
pub fn train_config(scenario: ScenarioKind, overrides: &toml::Table) -> Result<TrainConfig, CliError> {
    let base = toml::Table::try_from(TrainConfig::for_scenario(scenario)).map_err(|e| CliError::Config(e.to_string()))?;
    let mut merged = base;
    merge(&mut merged, overrides);
    merged.try_into().map_err(|e: toml::de::Error| CliError::Config(format!("[train]: {e}")))
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl Resolved {
    pub fn scenario(&self) -> ScenarioKind {
        self.train.scenario
    }

    /// Same configuration for another scenario; `[train]` overrides are
    /// already applied, only the scenario-dependent defaults change.
    pub fn with_scenario(&self, kind: ScenarioKind) -> Self {
        let mut r = self.clone();
        r.train.scenario = kind;
        if self.train.env == self.scenario().default_env() {
            r.train.env = kind.default_env();
        }
        r
    }
}
