//! Optimal stopping under the constrained expectation: the value process
//! `V = max(X, E(V_next))`, stopping rules, threshold rules `tau^lambda`, and the
//! finite checks that go with them (exhaustive oracle, supermartingale and
//! minimality checks, the frozen-value identity, the stopper-controller ladder).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::bsde::{backward_values, below_stopped, evaluate_stopped, OneStep, Pass, SolverSettings};
use crate::expr::FunctionSpec;
use crate::lattice::{AdaptedProcess, NodeId, PathTree};
use crate::penalize::{caps_for, GammaOperator, PenaltySchedule};
use crate::{Error, Result};

/// Largest tree the exhaustive enumeration accepts (`S(5) = 458330` rules).
pub const MAX_ENUMERATION_STEPS: usize = 5;
pub const DEFAULT_HIT_TOLERANCE: f64 = 1e-9;
pub const SUPERMARTINGALE_TOLERANCE: f64 = 1e-9;
pub const MINIMALITY_TOLERANCE: f64 = 1e-9;

/// `1 - 2^-k` for `k = 1..=20`.
pub fn default_lambda_schedule() -> Vec<f64> {
    (1..=20).map(|k| 1.0 - libm::ldexp(1.0, -k)).collect()
}

/// A stopping rule as one flag per node.
///
/// On a path tree the flags are kept canonical: only the first flagged node on each
/// path is set, and leaves without a stopped ancestor are set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StoppingRule {
    stop: Vec<bool>,
}

impl StoppingRule {
    pub fn from_flags(tree: &PathTree, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != tree.len() {
            return Err(Error::Shape {
                expected: tree.len(),
                actual: flags.len(),
            });
        }
        let mut stop = flags;
        for leaf in tree.leaves() {
            stop[leaf] = true;
        }
        if tree.is_path_tree() {
            let skip = below_stopped(tree, &stop);
            for (s, k) in stop.iter_mut().zip(&skip) {
                *s &= !k;
            }
        }
        Ok(StoppingRule { stop })
    }

    /// Stop at every node of `level`.
    pub fn at_level(tree: &PathTree, level: usize) -> Result<Self> {
        if level > tree.steps() {
            return Err(Error::Domain(format!("level {level} is beyond the tree's {} steps", tree.steps())));
        }
        let mut flags = vec![false; tree.len()];
        for n in tree.level_nodes(level) {
            flags[n] = true;
        }
        Self::from_flags(tree, flags)
    }

    fn from_mask(tree: &PathTree, mask: u64) -> Self {
        StoppingRule {
            stop: (0..tree.len()).map(|n| mask >> n & 1 == 1).collect(),
        }
    }

    pub fn stops(&self) -> &[bool] {
        &self.stop
    }

    pub fn stop_nodes(&self) -> Vec<NodeId> {
        (0..self.stop.len()).filter(|&n| self.stop[n]).collect()
    }

    /// Level at which each leaf's path is stopped (path trees only).
    pub fn leaf_stop_levels(&self, tree: &PathTree) -> Result<Vec<usize>> {
        tree.require_path_tree("per-path stopping levels")?;
        Ok(tree
            .leaves()
            .map(|leaf| {
                (0..=tree.steps())
                    .find(|&l| self.stop[tree.ancestor_at(leaf, l)])
                    .expect("leaves are always stopped")
            })
            .collect())
    }

    /// `self <= other` along every path.
    pub fn precedes(&self, other: &StoppingRule, tree: &PathTree) -> Result<bool> {
        let a = self.leaf_stop_levels(tree)?;
        let b = other.leaf_stop_levels(tree)?;
        Ok(a.iter().zip(&b).all(|(x, y)| x <= y))
    }
}

/// How the one-step constrained expectation is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnellMethod {
    /// Penalized operator `g + n phi` at a fixed level.
    PenalizedAt(f64),
    /// Exact minimization over the zero set (`z`-only constraints).
    Direct,
    /// Penalized at the stability cap of the tree's `dt`.
    CoupledLimit,
}

impl SnellMethod {
    pub fn label(&self) -> String {
        match self {
            SnellMethod::PenalizedAt(n) => format!("penalized(n={n})"),
            SnellMethod::Direct => "direct".to_string(),
            SnellMethod::CoupledLimit => "coupled_limit".to_string(),
        }
    }
}

pub fn build_operator(
    g: &FunctionSpec,
    phi: &FunctionSpec,
    tree: &PathTree,
    method: SnellMethod,
    settings: &SolverSettings,
) -> Result<GammaOperator> {
    crate::penalize::require_a3(phi, tree.horizon())?;
    match method {
        SnellMethod::PenalizedAt(n) => {
            let caps = caps_for(g, phi, tree, settings)?;
            if n > caps.n_max * (1.0 + 1e-12) {
                return Err(Error::Stability(format!(
                    "penalty level {n} exceeds the stability cap {} at dt = {}",
                    caps.n_max,
                    tree.dt()
                )));
            }
            GammaOperator::penalized(g, phi, n, tree, settings)
        }
        SnellMethod::Direct => GammaOperator::direct(g, phi, tree, settings),
        SnellMethod::CoupledLimit => {
            let caps = caps_for(g, phi, tree, settings)?;
            GammaOperator::penalized(g, phi, caps.n_max, tree, settings)
        }
    }
}

/// Fails unless the reward is finite and nonnegative.
pub fn check_reward(x: &AdaptedProcess, tree: &PathTree) -> Result<()> {
    x.check_shape(tree)?;
    if let Some(n) = x.values().iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Domain(format!(
            "reward must be finite and nonnegative, got {} at node {n}",
            x[n]
        )));
    }
    Ok(())
}

/// Value process and continuation values.
#[derive(Debug, Clone, PartialEq)]
pub struct Snell {
    pub v: AdaptedProcess,
    /// `E_t(V_next)`; NaN at leaves.
    pub continuation: Vec<f64>,
}

/// `V(leaf) = X(leaf)`, `V = max(X, E(V at children))`.
pub fn snell_values<O: OneStep>(op: &O, tree: &PathTree, x: &AdaptedProcess) -> Result<Snell> {
    check_reward(x, tree)?;
    let mut v = vec![f64::NAN; tree.len()];
    let mut continuation = vec![f64::NAN; tree.len()];
    for leaf in tree.leaves() {
        v[leaf] = x[leaf];
    }
    for level in (0..tree.steps()).rev() {
        for node in tree.level_nodes(level) {
            let (u, d) = tree.children(node).expect("non-leaf");
            let c = op.step(node, level, v[u], v[d])?.y;
            continuation[node] = c;
            v[node] = x[node].max(c);
        }
    }
    Ok(Snell {
        v: AdaptedProcess::from_raw(v),
        continuation,
    })
}

/// `E_0(X_tau)`.
pub fn rule_value<O: OneStep>(op: &O, tree: &PathTree, x: &AdaptedProcess, rule: &StoppingRule) -> Result<f64> {
    evaluate_stopped(op, tree, x, rule.stops())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("lambda must lie in (0, 1), got {lambda}")))
    }
}

/// First node with `X >= lambda V`.
pub fn lambda_rule(tree: &PathTree, x: &AdaptedProcess, v: &AdaptedProcess, lambda: f64) -> Result<StoppingRule> {
    check_lambda(lambda)?;
    x.check_shape(tree)?;
    v.check_shape(tree)?;
    StoppingRule::from_flags(tree, (0..tree.len()).map(|n| x[n] >= lambda * v[n]).collect())
}

/// First node with `|X - V| <= tolerance (1 + |V|)`.
pub fn tau_star(tree: &PathTree, x: &AdaptedProcess, v: &AdaptedProcess, tolerance: f64) -> Result<StoppingRule> {
    x.check_shape(tree)?;
    v.check_shape(tree)?;
    StoppingRule::from_flags(
        tree,
        (0..tree.len())
            .map(|n| libm::fabs(x[n] - v[n]) <= tolerance * (1.0 + libm::fabs(v[n])))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauBar {
    pub rule: StoppingRule,
    /// 1-based position in the schedule from which the rule no longer changes.
    pub stabilization_index: usize,
    /// False when the last two scheduled rules still differ.
    pub stabilized: bool,
    /// `tau^{lambda_k}` nondecreasing in `k` along every path (path trees only).
    pub monotone: Option<bool>,
    /// `tau_bar <= tau_star` along every path (path trees only).
    pub dominated_by_tau_star: Option<bool>,
}

/// Limit of `tau^{lambda_k}` along an increasing schedule. The whole schedule is
/// evaluated so the monotonicity check covers every level.
pub fn tau_bar(
    tree: &PathTree,
    x: &AdaptedProcess,
    v: &AdaptedProcess,
    schedule: &[f64],
    hit_tolerance: f64,
) -> Result<TauBar> {
    if schedule.is_empty() {
        return Err(Error::Config("lambda schedule is empty".into()));
    }
    for w in schedule.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Config(format!(
                "lambda schedule must be increasing ({} then {})",
                w[0], w[1]
            )));
        }
    }
    let rules = schedule
        .iter()
        .map(|&l| lambda_rule(tree, x, v, l))
        .collect::<Result<Vec<_>>>()?;
    let last = rules.len() - 1;
    let mut first_stable = last;
    while first_stable > 0 && rules[first_stable - 1] == rules[last] {
        first_stable -= 1;
    }
    let (monotone, dominated) = if tree.is_path_tree() {
        let mut monotone = true;
        for w in rules.windows(2) {
            monotone &= w[0].precedes(&w[1], tree)?;
        }
        let star = tau_star(tree, x, v, hit_tolerance)?;
        (Some(monotone), Some(rules[last].precedes(&star, tree)?))
    } else {
        (None, None)
    };
    Ok(TauBar {
        stabilization_index: first_stable + 1,
        stabilized: last > 0 && rules[last - 1] == rules[last],
        rule: rules.into_iter().last().expect("non-empty"),
        monotone,
        dominated_by_tau_star: dominated,
    })
}

/// Stop-node masks for the subtree at `node`, in enumeration order.
fn rule_masks(tree: &PathTree, node: NodeId) -> Vec<u64> {
    let own = 1u64 << node;
    let Some((u, d)) = tree.children(node) else {
        return vec![own];
    };
    let ups = rule_masks(tree, u);
    let downs = rule_masks(tree, d);
    let mut out = Vec::with_capacity(1 + ups.len() * downs.len());
    out.push(own);
    for a in &ups {
        for b in &downs {
            out.push(a | b);
        }
    }
    out
}

fn enumeration_masks(tree: &PathTree) -> Result<Vec<u64>> {
    tree.require_path_tree("stopping-rule enumeration")?;
    if tree.steps() > MAX_ENUMERATION_STEPS {
        return Err(Error::Capacity(format!(
            "enumerating stopping rules needs N <= {MAX_ENUMERATION_STEPS}, got N = {}",
            tree.steps()
        )));
    }
    Ok(rule_masks(tree, 0))
}

/// Every stopping rule: stop-at-root first, then up-subtree rules (outer) times
/// down-subtree rules (inner), recursively.
pub fn enumerate_stopping_rules(tree: &PathTree) -> Result<Vec<StoppingRule>> {
    Ok(enumeration_masks(tree)?
        .into_iter()
        .map(|m| StoppingRule::from_mask(tree, m))
        .collect())
}

/// `S(N) = 1 + S(N-1)^2`, `S(0) = 1`; `None` on overflow.
pub fn stopping_rule_count(steps: usize) -> Option<u128> {
    let mut s: u128 = 1;
    for _ in 0..steps {
        s = s.checked_mul(s)?.checked_add(1)?;
    }
    Some(s)
}

fn masked_value<O: OneStep>(op: &O, tree: &PathTree, x: &AdaptedProcess, mask: u64, node: NodeId) -> Result<f64> {
    if mask >> node & 1 == 1 {
        return Ok(x[node]);
    }
    let (u, d) = tree.children(node).expect("leaves are always stopped");
    let yu = masked_value(op, tree, x, mask, u)?;
    let yd = masked_value(op, tree, x, mask, d)?;
    Ok(op.step(node, tree.level(node), yu, yd)?.y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub value: f64,
    pub index: usize,
    pub rule: StoppingRule,
    /// `E_0(X_tau)` for every rule, in enumeration order.
    pub values: Vec<f64>,
}

/// Exhaustive maximum of `E_0(X_tau)`; ties go to the earliest rule.
pub fn brute_force_optimum<O: OneStep>(op: &O, tree: &PathTree, x: &AdaptedProcess) -> Result<BruteForce> {
    check_reward(x, tree)?;
    let masks = enumeration_masks(tree)?;
    let values = masks
        .iter()
        .map(|&m| masked_value(op, tree, x, m, 0))
        .collect::<Result<Vec<_>>>()?;
    let mut index = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[index] {
            index = i;
        }
    }
    Ok(BruteForce {
        value: values[index],
        index,
        rule: StoppingRule::from_mask(tree, masks[index]),
        values,
    })
}

/// `max_t |V_t - E_t(V_{tau^lambda(t)})|` via one backward pass with `V` frozen on
/// the hitting region.
pub fn verify_value_identity<O: OneStep>(
    op: &O,
    tree: &PathTree,
    x: &AdaptedProcess,
    v: &AdaptedProcess,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    x.check_shape(tree)?;
    v.check_shape(tree)?;
    let hit: Vec<bool> = (0..tree.len()).map(|n| x[n] >= lambda * v[n] || tree.is_leaf(n)).collect();
    let w = backward_values(
        op,
        tree,
        Pass {
            init: v.values(),
            start_level: tree.steps(),
            frozen: Some(&hit),
            skip: None,
        },
    )?;
    Ok(w.iter().zip(v.values()).map(|(a, b)| libm::fabs(a - b)).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupermartingaleReport {
    /// `max E_s(P_t) - P_s` over `s < t`.
    pub worst_violation: f64,
    /// `(node s, level t)` of the worst violation.
    pub location: Option<(NodeId, usize)>,
    /// Pairs `(s, t)` with `E_s(P_t) > P_s + tolerance`.
    pub violations: usize,
    pub pairs_checked: usize,
    /// `max P_s - E_s(P_t)`: the other direction, for martingale probes.
    pub worst_submartingale_gap: f64,
}

impl SupermartingaleReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn is_martingale(&self, tolerance: f64) -> bool {
        self.worst_violation <= tolerance && self.worst_submartingale_gap <= tolerance
    }
}

/// Checks `E_s(P_t) <= P_s + 1e-9` for every node `s` at a level below `t`.
pub fn supermartingale_check<O: OneStep>(op: &O, tree: &PathTree, p: &AdaptedProcess) -> Result<SupermartingaleReport> {
    p.check_shape(tree)?;
    let mut report = SupermartingaleReport {
        worst_violation: f64::NEG_INFINITY,
        location: None,
        violations: 0,
        pairs_checked: 0,
        worst_submartingale_gap: f64::NEG_INFINITY,
    };
    for t in 1..=tree.steps() {
        let e = backward_values(
            op,
            tree,
            Pass {
                init: p.values(),
                start_level: t,
                frozen: None,
                skip: None,
            },
        )?;
        for s in 0..t {
            for node in tree.level_nodes(s) {
                let excess = e[node] - p[node];
                report.pairs_checked += 1;
                if excess > SUPERMARTINGALE_TOLERANCE {
                    report.violations += 1;
                }
                if excess > report.worst_violation {
                    report.worst_violation = excess;
                    report.location = Some((node, t));
                }
                report.worst_submartingale_gap = report.worst_submartingale_gap.max(-excess);
            }
        }
    }
    if report.pairs_checked == 0 {
        report.worst_violation = 0.0;
        report.worst_submartingale_gap = 0.0;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CandidateOutcome {
    /// `max (V - candidate)`; passes when at most the tolerance.
    Accepted { max_excess: f64 },
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimalityReport {
    pub outcomes: Vec<(String, CandidateOutcome)>,
}

impl MinimalityReport {
    pub fn accepted(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|(_, o)| matches!(o, CandidateOutcome::Accepted { .. }))
            .count()
    }

    /// Every accepted candidate dominates `V`.
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|(_, o)| match o {
            CandidateOutcome::Accepted { max_excess } => *max_excess <= MINIMALITY_TOLERANCE,
            CandidateOutcome::Rejected { .. } => true,
        })
    }
}

/// Compares `V` with every candidate that is a supermartingale dominating `X`.
pub fn minimality_check<O: OneStep>(
    op: &O,
    tree: &PathTree,
    x: &AdaptedProcess,
    v: &AdaptedProcess,
    candidates: &[(String, AdaptedProcess)],
) -> Result<MinimalityReport> {
    x.check_shape(tree)?;
    v.check_shape(tree)?;
    let mut outcomes = Vec::with_capacity(candidates.len());
    for (name, c) in candidates {
        c.check_shape(tree)?;
        let outcome = if let Some(n) = (0..tree.len()).find(|&n| c[n] < x[n] - 1e-12) {
            CandidateOutcome::Rejected {
                reason: format!("does not dominate X at node {n} ({} < {})", c[n], x[n]),
            }
        } else {
            let sm = supermartingale_check(op, tree, c)?;
            if sm.passed() {
                let max_excess = (0..tree.len()).map(|n| v[n] - c[n]).fold(f64::NEG_INFINITY, f64::max);
                CandidateOutcome::Accepted { max_excess }
            } else {
                let (node, level) = sm.location.expect("a violation has a location");
                CandidateOutcome::Rejected {
                    reason: format!(
                        "not a supermartingale: E_s(P_t) exceeds P_s by {} at node {node}, t = level {level}",
                        sm.worst_violation
                    ),
                }
            }
        };
        outcomes.push((name.clone(), outcome));
    }
    Ok(MinimalityReport { outcomes })
}

/// Standard candidates: value processes of larger rewards (always admissible), plus
/// constant `sup X`, `V + 0.5` and `X` itself (admissible or not depending on `g`).
pub fn dominating_candidates<O: OneStep>(
    op: &O,
    tree: &PathTree,
    x: &AdaptedProcess,
    v: &AdaptedProcess,
) -> Result<Vec<(String, AdaptedProcess)>> {
    let sup = x.values().iter().copied().fold(0.0, f64::max);
    let shifted = |c: f64| AdaptedProcess::from_fn(tree, |n| x[n] + c);
    let floored = AdaptedProcess::from_fn(tree, |n| x[n].max(0.5 * sup));
    Ok(vec![
        ("snell(X + 0.25)".to_string(), snell_values(op, tree, &shifted(0.25))?.v),
        ("snell(X + 1)".to_string(), snell_values(op, tree, &shifted(1.0))?.v),
        ("snell(max(X, sup X / 2))".to_string(), snell_values(op, tree, &floored)?.v),
        ("constant sup X".to_string(), AdaptedProcess::constant(tree, sup)),
        ("V + 0.5".to_string(), AdaptedProcess::from_fn(tree, |n| v[n] + 0.5)),
        ("X".to_string(), x.clone()),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub lambda: f64,
    pub rule: StoppingRule,
    /// `E_0(X_{tau^lambda})`.
    pub value: f64,
}

/// Whether `tau_bar = tau_star` and whether `V` stopped at `tau_bar` is a martingale.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleProbe {
    pub tau_bar_equals_tau_star: bool,
    pub stopped_value: SupermartingaleReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnellOptions {
    /// Levels tabulated in the report.
    pub lambdas: Vec<f64>,
    /// Schedule whose limit defines `tau_bar`.
    pub lambda_schedule: Vec<f64>,
    pub hit_tolerance: f64,
    /// Run the exhaustive oracle (path trees with `N <= 5`).
    pub brute_force: bool,
}

impl Default for SnellOptions {
    fn default() -> Self {
        SnellOptions {
            lambdas: vec![0.5, 0.9, 0.99],
            lambda_schedule: default_lambda_schedule(),
            hit_tolerance: DEFAULT_HIT_TOLERANCE,
            brute_force: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnellReport {
    pub method: SnellMethod,
    /// Penalty level used, when penalized.
    pub level: Option<f64>,
    pub v: AdaptedProcess,
    pub continuation: Vec<f64>,
    pub lambda_table: Vec<LambdaRow>,
    pub tau_star: StoppingRule,
    pub tau_star_value: f64,
    pub tau_bar: TauBar,
    pub tau_bar_value: f64,
    pub brute_force: Option<BruteForce>,
    /// Path trees only.
    pub probe: Option<MartingaleProbe>,
}

impl SnellReport {
    pub fn root(&self) -> f64 {
        self.v[0]
    }
}

/// `V` stopped at `rule`: constant below each stop node.
pub fn stopped_process(tree: &PathTree, v: &AdaptedProcess, rule: &StoppingRule) -> Result<AdaptedProcess> {
    tree.require_path_tree("stopped processes")?;
    let skip = below_stopped(tree, rule.stops());
    let mut p = v.clone();
    for node in 1..tree.len() {
        let parent = tree.parent(node).expect("non-root");
        if skip[node] {
            p[node] = p[parent];
        }
    }
    Ok(p)
}

/// Value process, threshold rules and (optionally) the exhaustive oracle.
pub fn snell_envelope(
    g: &FunctionSpec,
    phi: &FunctionSpec,
    x: &AdaptedProcess,
    tree: &PathTree,
    method: SnellMethod,
    settings: &SolverSettings,
    options: &SnellOptions,
) -> Result<SnellReport> {
    let op = build_operator(g, phi, tree, method, settings)?;
    snell_report(&op, method, tree, x, options)
}

pub fn snell_report(
    op: &GammaOperator,
    method: SnellMethod,
    tree: &PathTree,
    x: &AdaptedProcess,
    options: &SnellOptions,
) -> Result<SnellReport> {
    let snell = snell_values(op, tree, x)?;
    let v = &snell.v;
    let lambda_table = options
        .lambdas
        .iter()
        .map(|&lambda| {
            let rule = lambda_rule(tree, x, v, lambda)?;
            let value = rule_value(op, tree, x, &rule)?;
            Ok(LambdaRow { lambda, rule, value })
        })
        .collect::<Result<Vec<_>>>()?;
    let star = tau_star(tree, x, v, options.hit_tolerance)?;
    let tau_star_value = rule_value(op, tree, x, &star)?;
    let bar = tau_bar(tree, x, v, &options.lambda_schedule, options.hit_tolerance)?;
    let tau_bar_value = rule_value(op, tree, x, &bar.rule)?;
    let brute_force = if options.brute_force {
        Some(brute_force_optimum(op, tree, x)?)
    } else {
        None
    };
    let probe = if tree.is_path_tree() {
        let stopped = stopped_process(tree, v, &bar.rule)?;
        Some(MartingaleProbe {
            tau_bar_equals_tau_star: bar.rule == star,
            stopped_value: supermartingale_check(op, tree, &stopped)?,
        })
    } else {
        None
    };
    Ok(SnellReport {
        method,
        level: op.level(),
        v: snell.v,
        continuation: snell.continuation,
        lambda_table,
        tau_star: star,
        tau_star_value,
        tau_bar: bar,
        tau_bar_value,
        brute_force,
        probe,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopperController {
    /// `(n, V_n(0))` per level.
    pub levels: Vec<(f64, f64)>,
    /// Nodewise nondecreasing in `n` within `1e-10`.
    pub nondecreasing: bool,
    pub sup: f64,
    pub reference: SnellMethod,
    pub reference_v0: f64,
    /// `|sup - reference_v0|`.
    pub gap: f64,
}

/// Classical `g_n`-Snell envelopes along `schedule`, compared with the direct value
/// (`z`-only constraints) or the coupled limit otherwise.
pub fn stopper_controller_value(
    g: &FunctionSpec,
    phi: &FunctionSpec,
    x: &AdaptedProcess,
    tree: &PathTree,
    schedule: &PenaltySchedule,
    settings: &SolverSettings,
) -> Result<StopperController> {
    schedule.validate()?;
    let mut levels = Vec::with_capacity(schedule.levels.len());
    let mut nondecreasing = true;
    let mut prev: Option<AdaptedProcess> = None;
    for &n in &schedule.levels {
        let op = build_operator(g, phi, tree, SnellMethod::PenalizedAt(n), settings)?;
        let v = snell_values(&op, tree, x)?.v;
        if let Some(p) = &prev {
            nondecreasing &= (0..tree.len()).all(|i| v[i] >= p[i] - 1e-10);
        }
        levels.push((n, v[0]));
        prev = Some(v);
    }
    let sup = levels.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
    let reference = if phi.is_z_only() {
        SnellMethod::Direct
    } else {
        SnellMethod::CoupledLimit
    };
    let op = build_operator(g, phi, tree, reference, settings)?;
    let reference_v0 = snell_values(&op, tree, x)?.v[0];
    Ok(StopperController {
        levels,
        nondecreasing,
        sup,
        reference,
        reference_v0,
        gap: libm::fabs(sup - reference_v0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{realize_reward, TreeConfig};

    fn drv(s: &str) -> FunctionSpec {
        FunctionSpec::driver(s).unwrap()
    }

    fn running() -> (PathTree, AdaptedProcess) {
        let tree = PathTree::build(TreeConfig::path_tree(2, 2.0)).unwrap();
        let (x, _) = realize_reward(&FunctionSpec::reward("abs(w)").unwrap(), &tree, None).unwrap();
        (tree, x)
    }

    fn op(g: &str, phi: &str, tree: &PathTree, method: SnellMethod) -> GammaOperator {
        build_operator(&drv(g), &drv(phi), tree, method, &SolverSettings::default()).unwrap()
    }

    #[test]
    fn counts_follow_the_recursion() {
        let counts: Vec<usize> = (1..=4)
            .map(|n| {
                let t = PathTree::build(TreeConfig::path_tree(n, 1.0)).unwrap();
                enumerate_stopping_rules(&t).unwrap().len()
            })
            .collect();
        assert_eq!(counts, vec![2, 5, 26, 677]);
        assert_eq!(stopping_rule_count(0), Some(1));
        assert_eq!(stopping_rule_count(5), Some(458_330));
        let t = PathTree::build(TreeConfig::path_tree(6, 1.0)).unwrap();
        assert!(matches!(enumerate_stopping_rules(&t), Err(Error::Capacity(_))));
    }

    #[test]
    fn enumeration_is_duplicate_free_and_canonical() {
        let t = PathTree::build(TreeConfig::path_tree(3, 1.0)).unwrap();
        let rules = enumerate_stopping_rules(&t).unwrap();
        assert_eq!(rules[0], StoppingRule::at_level(&t, 0).unwrap());
        for (i, r) in rules.iter().enumerate() {
            assert_eq!(&StoppingRule::from_flags(&t, r.stops().to_vec()).unwrap(), r);
            assert!(rules[..i].iter().all(|q| q != r));
        }
    }

    #[test]
    fn running_example() {
        let (tree, x) = running();
        let op = op("0", "0", &tree, SnellMethod::Direct);
        let s = snell_values(&op, &tree, &x).unwrap();
        assert_eq!(s.v.values(), &[1.0, 1.0, 1.0, 2.0, 0.0, 0.0, 2.0]);
        let bf = brute_force_optimum(&op, &tree, &x).unwrap();
        assert_eq!(bf.values, vec![0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!((bf.value, bf.index), (1.0, 1));
        assert_eq!(bf.rule, StoppingRule::at_level(&tree, 1).unwrap());

        let at1 = StoppingRule::at_level(&tree, 1).unwrap();
        assert_eq!(lambda_rule(&tree, &x, &s.v, 0.9).unwrap(), at1);
        assert_eq!(tau_star(&tree, &x, &s.v, 1e-9).unwrap(), at1);
        let bar = tau_bar(&tree, &x, &s.v, &default_lambda_schedule(), 1e-9).unwrap();
        assert_eq!(bar.rule, at1);
        assert_eq!(bar.stabilization_index, 1);
        assert!(bar.stabilized);
        assert_eq!(bar.monotone, Some(true));
        assert_eq!(bar.dominated_by_tau_star, Some(true));
        let r5 = lambda_rule(&tree, &x, &s.v, 0.5).unwrap();
        assert!(r5.precedes(&lambda_rule(&tree, &x, &s.v, 0.9).unwrap(), &tree).unwrap());
        assert!(matches!(lambda_rule(&tree, &x, &s.v, 1.0), Err(Error::Domain(_))));

        for lambda in [0.5, 0.9, 0.99] {
            assert!(verify_value_identity(&op, &tree, &x, &s.v, lambda).unwrap() <= 1e-9);
        }
        assert!(supermartingale_check(&op, &tree, &s.v).unwrap().passed());
        let sx = supermartingale_check(&op, &tree, &x).unwrap();
        assert!(!sx.passed());
        assert_eq!(sx.location.map(|l| l.0), Some(0));
    }

    #[test]
    fn pathwise_max_example() {
        let (tree, x) = running();
        let op = op("0", "abs(z)", &tree, SnellMethod::Direct);
        let s = snell_values(&op, &tree, &x).unwrap();
        assert_eq!(s.v[0], 2.0);
        assert!(verify_value_identity(&op, &tree, &x, &s.v, 0.9).unwrap() <= 1e-9);
        assert_eq!(brute_force_optimum(&op, &tree, &x).unwrap().value, 2.0);
    }

    #[test]
    fn constant_reward() {
        let tree = PathTree::build(TreeConfig::path_tree(3, 1.0)).unwrap();
        let x = AdaptedProcess::constant(&tree, 0.7);
        let op = op("0.5*abs(z)", "neg(z)", &tree, SnellMethod::Direct);
        let report = snell_report(&op, SnellMethod::Direct, &tree, &x, &SnellOptions {
            brute_force: true,
            ..SnellOptions::default()
        })
        .unwrap();
        assert!(report.v.values().iter().all(|&v| v == 0.7));
        let root = StoppingRule::at_level(&tree, 0).unwrap();
        assert_eq!(report.tau_star, root);
        assert_eq!(report.tau_bar.rule, root);
        let bf = report.brute_force.unwrap();
        assert_eq!((bf.value, bf.index), (0.7, 0));
        for lambda in [0.5, 0.9] {
            assert_eq!(verify_value_identity(&op, &tree, &x, &report.v, lambda).unwrap(), 0.0);
        }
        assert!(supermartingale_check(&op, &tree, &x).unwrap().passed());
    }

    #[test]
    fn minimality_candidates() {
        let (tree, x) = running();
        let op = op("0", "0", &tree, SnellMethod::Direct);
        let v = snell_values(&op, &tree, &x).unwrap().v;
        let cands = dominating_candidates(&op, &tree, &x, &v).unwrap();
        let report = minimality_check(&op, &tree, &x, &v, &cands).unwrap();
        assert!(report.passed());
        assert!(report.accepted() >= 5, "{report:?}");
        let last = &report.outcomes.last().unwrap().1;
        assert!(matches!(last, CandidateOutcome::Rejected { reason } if reason.contains("supermartingale")));
    }

    #[test]
    fn stopper_controller() {
        let (tree, x) = running();
        let s = SolverSettings::default();
        let sched = PenaltySchedule::for_problem(&drv("0"), &drv("0"), &tree, &s).unwrap();
        let sc = stopper_controller_value(&drv("0"), &drv("0"), &x, &tree, &sched, &s).unwrap();
        assert!(sc.levels.iter().all(|l| l.1 == 1.0));
        assert_eq!(sc.gap, 0.0);

        let tree = PathTree::build(TreeConfig::path_tree(2, 0.125)).unwrap();
        let (x, _) = realize_reward(&FunctionSpec::reward("abs(w)").unwrap(), &tree, None).unwrap();
        let caps = caps_for(&drv("0"), &drv("neg(z)"), &tree, &s).unwrap();
        let sched = PenaltySchedule::with_levels(vec![1.0, 2.0, caps.n_max], caps, 1e-8).unwrap();
        let sc = stopper_controller_value(&drv("0"), &drv("neg(z)"), &x, &tree, &sched, &s).unwrap();
        assert!(sc.nondecreasing);
        assert!(sc.gap <= 1e-12, "{sc:?}");
    }

    #[test]
    fn rejects_negative_rewards() {
        let (tree, _) = running();
        let x = AdaptedProcess::constant(&tree, -1.0);
        let op = op("0", "0", &tree, SnellMethod::Direct);
        assert!(matches!(snell_values(&op, &tree, &x), Err(Error::Domain(_))));
    }

    #[test]
    fn penalized_level_above_cap_is_rejected() {
        let (tree, _) = running();
        let err = build_operator(&drv("0"), &drv("abs(z)"), &tree, SnellMethod::PenalizedAt(5.0), &SolverSettings::default())
            .unwrap_err();
        assert!(matches!(err, Error::Stability(_)));
    }
}
