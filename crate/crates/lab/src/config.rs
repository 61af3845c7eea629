//! Experiment configuration: one JSON document plus dotted-path overrides.

use std::fmt;
use std::path::Path;

use gstop_core::bsde::SolverSettings;
use gstop_core::expr::FunctionSpec;
use gstop_core::lattice::{PathTree, TreeConfig, TreeMode};
use gstop_core::penalize::DEFAULT_CONVERGENCE_TOLERANCE;
use gstop_core::stopping::{default_lambda_schedule, SnellMethod, DEFAULT_HIT_TOLERANCE};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Generator `g(t, y, z)`.
    pub generator: String,
    /// Constraint `phi(t, y, z)`.
    pub constraint: String,
    /// Reward `X(t, w)` for the stopping commands.
    pub reward: String,
    pub terminal: Terminal,
    pub tree: TreeSection,
    pub penalty: PenaltySection,
    pub method: MethodSection,
    /// Levels tabulated in the stopping report.
    pub lambdas: Vec<f64>,
    /// Increasing schedule whose limit defines `tau_bar`.
    pub lambda_schedule: Vec<f64>,
    pub tolerances: Tolerances,
    pub seed: u64,
    /// Trials per property in `verify`.
    pub trials: usize,
    pub ladder: LadderSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            generator: "0".into(),
            constraint: "0".into(),
            reward: "abs(w)".into(),
            terminal: Terminal::default(),
            tree: TreeSection::default(),
            penalty: PenaltySection::default(),
            method: MethodSection::default(),
            lambdas: vec![0.5, 0.9, 0.99],
            lambda_schedule: default_lambda_schedule(),
            tolerances: Tolerances::default(),
            seed: 0,
            trials: 200,
            ladder: LadderSection::default(),
        }
    }
}

/// Terminal condition: an expression in `w` evaluated at `t = T`, or explicit leaf values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum Terminal {
    Expr(String),
    Values(Vec<f64>),
}

impl Default for Terminal {
    fn default() -> Self {
        Terminal::Expr("w*w".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Path,
    Recombining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeSection {
    pub steps: usize,
    pub horizon: f64,
    pub mode: Mode,
}

impl Default for TreeSection {
    fn default() -> Self {
        TreeSection {
            steps: 4,
            horizon: 1.0,
            mode: Mode::Path,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltySection {
    /// Explicit levels; when absent, `1, 2, 4, ...` up to the stability cap.
    pub levels: Option<Vec<f64>>,
    pub tolerance: f64,
}

impl Default for PenaltySection {
    fn default() -> Self {
        PenaltySection {
            levels: None,
            tolerance: DEFAULT_CONVERGENCE_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Penalized,
    Direct,
    CoupledLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    pub kind: MethodKind,
    /// Penalty level for `penalized`; defaults to the stability cap.
    pub level: Option<f64>,
}

impl Default for MethodSection {
    fn default() -> Self {
        MethodSection {
            kind: MethodKind::Direct,
            level: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub picard: f64,
    pub picard_max_iterations: u32,
    pub contraction_limit: f64,
    pub hit: f64,
    pub suite_direct: f64,
    pub suite_penalized: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let s = SolverSettings::default();
        Tolerances {
            picard: s.picard_tolerance,
            picard_max_iterations: s.picard_max_iterations,
            contraction_limit: s.contraction_limit,
            hit: DEFAULT_HIT_TOLERANCE,
            suite_direct: 1e-9,
            suite_penalized: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderSection {
    pub steps: Vec<usize>,
}

impl Default for LadderSection {
    fn default() -> Self {
        LadderSection { steps: vec![4, 8, 16] }
    }
}

/// A usage or configuration problem (exit code 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Reads a config file and applies `key=value` overrides.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("config {} is not valid JSON: {e}", path.display())))?;
    from_value(value, overrides)
}

pub fn from_value(mut value: Value, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| ConfigError(format!("invalid config: {e}")))
}

/// Expression fields, taken verbatim so that `generator=0` stays a string.
const STRING_FIELDS: [&str; 4] = ["generator", "constraint", "reward", "terminal.expr"];

/// `a.b.c=value`; the value is parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override `{spec}` is not of the form key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(ConfigError(format!("override `{spec}` has an empty key segment")));
    }
    let parsed = if STRING_FIELDS.contains(&path) {
        Value::String(raw.to_string())
    } else {
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
    };
    let mut cur = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                let at = segments[..i].join(".");
                return Err(ConfigError(format!("override `{path}`: `{at}` is not an object")));
            }
        }
        let map = cur.as_object_mut().expect("object");
        if i + 1 == segments.len() {
            map.insert(seg.to_string(), parsed);
            return Ok(());
        }
        cur = map.entry(seg.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}

impl ExperimentConfig {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            picard_tolerance: self.tolerances.picard,
            picard_max_iterations: self.tolerances.picard_max_iterations,
            contraction_limit: self.tolerances.contraction_limit,
        }
    }

    pub fn tree_config(&self, steps: usize) -> TreeConfig {
        TreeConfig {
            steps,
            horizon: self.tree.horizon,
            mode: match self.tree.mode {
                Mode::Path => TreeMode::PathTree,
                Mode::Recombining => TreeMode::Recombining,
            },
        }
    }

    pub fn build_tree(&self) -> Result<PathTree, ConfigError> {
        PathTree::build(self.tree_config(self.tree.steps)).map_err(|e| ConfigError(format!("tree: {e}")))
    }

    pub fn snell_method(&self) -> SnellMethod {
        match (self.method.kind, self.method.level) {
            (MethodKind::Direct, _) => SnellMethod::Direct,
            (MethodKind::Penalized, Some(n)) => SnellMethod::PenalizedAt(n),
            (MethodKind::Penalized, None) | (MethodKind::CoupledLimit, _) => SnellMethod::CoupledLimit,
        }
    }
}

/// Parsed expressions.
#[derive(Debug, Clone)]
pub struct Functions {
    pub g: FunctionSpec,
    pub phi: FunctionSpec,
    pub reward: FunctionSpec,
}

/// Parses every expression and screens the constraint for `phi(t, y, 0) = 0`.
pub fn functions(cfg: &ExperimentConfig) -> Result<Functions, ConfigError> {
    let field = |name: &str, r: Result<FunctionSpec, gstop_core::expr::ParseError>| {
        r.map_err(|e| ConfigError(format!("{name}: {e}")))
    };
    let g = field("generator", FunctionSpec::driver(&cfg.generator))?;
    let phi = field("constraint", FunctionSpec::driver(&cfg.constraint))?;
    let reward = field("reward", FunctionSpec::reward(&cfg.reward))?;
    gstop_core::penalize::require_a3(&phi, cfg.tree.horizon).map_err(|e| ConfigError(format!("constraint: {e}")))?;
    Ok(Functions { g, phi, reward })
}
