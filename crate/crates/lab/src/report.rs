//! Report types and their JSON / CSV serialization.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;

pub const SCHEMA_VERSION: u32 = 1;

pub const LAMBDA_HEADER: [&str; 3] = ["lambda", "value", "v0"];
pub const PENALTY_HEADER: [&str; 3] = ["n", "root", "max_violation"];
pub const LADDER_HEADER: [&str; 5] = ["steps", "n_max", "penalized_root", "direct_root", "gap"];
pub const NODES_HEADER: [&str; 6] = ["node", "level", "t", "w", "value", "reward"];

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    pub resolved: Resolved,
    pub results: Results,
}

/// Parameters derived from the config and used by the run.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub generator: String,
    pub constraint: String,
    pub z_only_constraint: bool,
    pub dt: f64,
    pub caps: Caps,
    pub penalty_levels: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Caps {
    pub contraction: Option<f64>,
    pub monotone: Option<f64>,
    pub n_max: f64,
    pub bounded: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Results {
    Expectation(ExpectationResult),
    Stop(StopResult),
    Oracle(OracleResult),
    Verify(VerifyResult),
    Ladder(LadderResult),
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelRow {
    pub n: f64,
    pub root: f64,
    pub max_violation: f64,
    pub gap_to_previous: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Residual {
    pub max_abs: f64,
    pub min_dc: f64,
    pub increasing: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeRow {
    pub node: usize,
    pub level: usize,
    pub t: f64,
    pub w: f64,
    pub value: f64,
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpectationResult {
    pub penalized_root: f64,
    pub converged: bool,
    pub levels: Vec<LevelRow>,
    pub direct_root: Option<f64>,
    /// `direct - penalized` at the root.
    pub gap: Option<f64>,
    pub direct_residual: Option<Residual>,
    #[serde(skip)]
    pub nodes: Vec<NodeRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RuleSummary {
    pub stop_nodes: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaEntry {
    pub lambda: f64,
    pub value: f64,
    pub v0: f64,
    pub stop_nodes: Vec<usize>,
    /// `max_t |V_t - E_t(V at tau^lambda(t))|`.
    pub identity_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TauBarSummary {
    pub stop_nodes: Vec<usize>,
    pub value: f64,
    pub stabilization_index: usize,
    pub stabilized: bool,
    pub monotone: Option<bool>,
    pub dominated_by_tau_star: Option<bool>,
    /// `|E_0(X at tau_bar) - V_0|`.
    pub endpoint_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SupermartingaleSummary {
    pub passed: bool,
    pub violations: usize,
    pub pairs_checked: usize,
    pub worst_violation: f64,
    pub worst_at: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateRow {
    pub candidate: String,
    pub accepted: bool,
    pub max_excess: Option<f64>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimalitySummary {
    pub passed: bool,
    pub accepted: usize,
    pub candidates: Vec<CandidateRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSummary {
    pub tau_bar_equals_tau_star: bool,
    pub stopped_value_is_martingale: bool,
    pub worst_supermartingale_excess: f64,
    pub worst_submartingale_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ControllerSummary {
    pub levels: Vec<(f64, f64)>,
    pub nondecreasing: bool,
    pub sup: f64,
    pub reference: String,
    pub reference_v0: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StopResult {
    pub method: String,
    pub level: Option<f64>,
    pub v0: f64,
    pub x0: f64,
    pub lambda_table: Vec<LambdaEntry>,
    pub tau_star: RuleSummary,
    pub tau_bar: TauBarSummary,
    pub supermartingale: SupermartingaleSummary,
    pub minimality: MinimalitySummary,
    pub probe: Option<ProbeSummary>,
    pub stopper_controller: ControllerSummary,
    #[serde(skip)]
    pub nodes: Vec<NodeRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub dp_value: f64,
    pub brute_force_value: f64,
    pub gap: f64,
    pub rules: usize,
    pub argmax_index: usize,
    pub argmax_stop_nodes: Vec<usize>,
    pub stop: StopResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyRow {
    pub property: String,
    pub operator: String,
    pub level: Option<f64>,
    pub tolerance: f64,
    pub trials: usize,
    pub failures: usize,
    pub passed: bool,
    pub worst_violation: f64,
    pub worst_at: Option<(usize, usize)>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyResult {
    pub seed: u64,
    pub trials: usize,
    pub passed: bool,
    pub failures: usize,
    pub rows: Vec<PropertyRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderRow {
    pub steps: usize,
    pub dt: f64,
    pub n_max: f64,
    pub penalized_root: f64,
    pub direct_root: Option<f64>,
    pub gap: Option<f64>,
    pub snell_penalized_v0: f64,
    pub snell_reference_v0: f64,
    pub snell_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderResult {
    pub rows: Vec<LadderRow>,
    /// Absolute gaps nonincreasing along the ladder (within `1e-12`).
    pub gap_nonincreasing: Option<bool>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Default output directory: `$GSTOP_OUT_DIR`, else `gstop-out`.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os("GSTOP_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("gstop-out"))
}

fn write_csv<const N: usize>(path: &Path, header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn node_rows(rows: &[NodeRow]) -> impl Iterator<Item = [String; 6]> + '_ {
    rows.iter().map(|r| {
        [
            r.node.to_string(),
            r.level.to_string(),
            num(r.t),
            num(r.w),
            num(r.value),
            opt(r.reward),
        ]
    })
}

/// Writes the long-format CSV tables that apply to the report's command and returns
/// their paths.
pub fn emit_plot_data(report: &RunReport, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    match &report.results {
        Results::Expectation(e) => {
            write_csv(
                &out("penalty.csv"),
                PENALTY_HEADER,
                e.levels.iter().map(|l| [num(l.n), num(l.root), num(l.max_violation)]),
            )?;
            write_csv(&out("nodes.csv"), NODES_HEADER, node_rows(&e.nodes))?;
        }
        Results::Stop(s) | Results::Oracle(OracleResult { stop: s, .. }) => {
            write_csv(
                &out("lambda.csv"),
                LAMBDA_HEADER,
                s.lambda_table.iter().map(|l| [num(l.lambda), num(l.value), num(l.v0)]),
            )?;
            write_csv(&out("nodes.csv"), NODES_HEADER, node_rows(&s.nodes))?;
        }
        Results::Verify(_) => {}
        Results::Ladder(l) => {
            write_csv(
                &out("ladder.csv"),
                LADDER_HEADER,
                l.rows.iter().map(|r| {
                    [
                        r.steps.to_string(),
                        num(r.n_max),
                        num(r.penalized_root),
                        opt(r.direct_root),
                        opt(r.gap),
                    ]
                }),
            )?;
        }
    }
    Ok(written)
}
