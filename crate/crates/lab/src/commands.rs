//! The five experiment commands.

use gstop_core::bsde::{supersolution_residual, SolverSettings};
use gstop_core::lattice::{realize_reward, realize_terminal, AdaptedProcess, PathTree};
use gstop_core::penalize::{
    caps_for, gamma_expectation, gamma_expectation_direct, property_suite, PenaltySchedule, StabilityCaps, SuiteOptions,
};
use gstop_core::stopping::{
    build_operator, dominating_candidates, minimality_check, snell_report, stopper_controller_value,
    supermartingale_check, verify_value_identity, CandidateOutcome, SnellMethod, SnellOptions, StoppingRule,
};
use gstop_core::Error;

use crate::config::{ConfigError, ExperimentConfig, Functions, Terminal};
use crate::report::*;
use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Expectation,
    Stop,
    Oracle,
    Verify,
    Ladder,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Expectation => "expectation",
            Command::Stop => "stop",
            Command::Oracle => "oracle",
            Command::Verify => "verify",
            Command::Ladder => "ladder",
        }
    }
}

fn caps_summary(c: &StabilityCaps) -> Caps {
    let finite = |v: f64| v.is_finite().then_some(v);
    Caps {
        contraction: finite(c.contraction),
        monotone: finite(c.monotone),
        n_max: c.n_max,
        bounded: c.bounded,
    }
}

fn schedule(cfg: &ExperimentConfig, f: &Functions, tree: &PathTree, s: &SolverSettings) -> Result<PenaltySchedule, Failure> {
    let caps = caps_for(&f.g, &f.phi, tree, s)?;
    Ok(match &cfg.penalty.levels {
        Some(levels) => PenaltySchedule::with_levels(levels.clone(), caps, cfg.penalty.tolerance)?,
        None => PenaltySchedule::geometric(caps, cfg.penalty.tolerance),
    })
}

fn terminal(cfg: &ExperimentConfig, tree: &PathTree) -> Result<Vec<f64>, Failure> {
    match &cfg.terminal {
        Terminal::Expr(text) => {
            let f = gstop_core::expr::FunctionSpec::reward(text).map_err(|e| ConfigError(format!("terminal.expr: {e}")))?;
            Ok(realize_terminal(&f, tree)?)
        }
        Terminal::Values(v) => {
            if v.len() != tree.leaves().len() {
                return Err(ConfigError(format!(
                    "terminal.values has {} entries but the tree has {} leaves",
                    v.len(),
                    tree.leaves().len()
                ))
                .into());
            }
            Ok(v.clone())
        }
    }
}

fn node_rows(tree: &PathTree, values: &AdaptedProcess, reward: Option<&AdaptedProcess>) -> Vec<NodeRow> {
    (0..tree.len())
        .map(|n| NodeRow {
            node: n,
            level: tree.level(n),
            t: tree.time(n),
            w: tree.w(n),
            value: values[n],
            reward: reward.map(|x| x[n]),
        })
        .collect()
}

pub fn run(cmd: Command, cfg: &ExperimentConfig, f: &Functions) -> Result<RunReport, Failure> {
    let tree = cfg.build_tree()?;
    let s = cfg.settings();
    s.validate()?;
    let sched = schedule(cfg, f, &tree, &s)?;
    let results = match cmd {
        Command::Expectation => Results::Expectation(expectation(cfg, f, &tree, &s, &sched)?),
        Command::Stop => Results::Stop(stop(cfg, f, &tree, &s, &sched)?),
        Command::Oracle => Results::Oracle(oracle(cfg, f, &tree, &s, &sched)?),
        Command::Verify => Results::Verify(verify(cfg, f, &tree, &s)?),
        Command::Ladder => Results::Ladder(ladder(cfg, f, &s)?),
    };
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        command: cmd.name().to_string(),
        config: cfg.clone(),
        resolved: Resolved {
            generator: f.g.canonical(),
            constraint: f.phi.canonical(),
            z_only_constraint: f.phi.is_z_only(),
            dt: tree.dt(),
            caps: caps_summary(&sched.caps),
            penalty_levels: sched.levels.clone(),
        },
        results,
    })
}

fn expectation(
    cfg: &ExperimentConfig,
    f: &Functions,
    tree: &PathTree,
    s: &SolverSettings,
    sched: &PenaltySchedule,
) -> Result<ExpectationResult, Failure> {
    let xi = terminal(cfg, tree)?;
    let pen = gamma_expectation(&f.g, &f.phi, &xi, tree, sched, s)?;
    let (direct_root, direct_residual) = if f.phi.is_z_only() {
        let d = gamma_expectation_direct(&f.g, &f.phi, &xi, tree, s)?;
        let r = supersolution_residual(&d.as_bsde_solution(), &f.g, tree)?;
        (
            Some(d.root()),
            Some(Residual {
                max_abs: r.max_abs,
                min_dc: r.min_dc,
                increasing: r.increasing,
            }),
        )
    } else {
        (None, None)
    };
    Ok(ExpectationResult {
        penalized_root: pen.root(),
        converged: pen.converged,
        levels: pen
            .levels
            .iter()
            .map(|l| LevelRow {
                n: l.n,
                root: l.root,
                max_violation: l.max_violation,
                gap_to_previous: l.gap_to_previous,
            })
            .collect(),
        direct_root,
        gap: direct_root.map(|d| d - pen.root()),
        direct_residual,
        nodes: node_rows(tree, &pen.y, None),
    })
}

fn reward(f: &Functions, tree: &PathTree) -> Result<AdaptedProcess, Failure> {
    let (x, flags) = realize_reward(&f.reward, tree, None)?;
    if flags.negative {
        return Err(ConfigError(format!(
            "reward: `{}` takes negative values (min {}); rewards must be nonnegative",
            f.reward.source(),
            flags.min
        ))
        .into());
    }
    Ok(x)
}

fn stop_nodes(rule: &StoppingRule) -> Vec<usize> {
    rule.stop_nodes()
}

fn stop_with(
    cfg: &ExperimentConfig,
    f: &Functions,
    tree: &PathTree,
    s: &SolverSettings,
    sched: &PenaltySchedule,
    brute_force: bool,
) -> Result<(StopResult, Option<gstop_core::stopping::BruteForce>), Failure> {
    let x = reward(f, tree)?;
    let method = cfg.snell_method();
    let op = build_operator(&f.g, &f.phi, tree, method, s)?;
    let options = SnellOptions {
        lambdas: cfg.lambdas.clone(),
        lambda_schedule: cfg.lambda_schedule.clone(),
        hit_tolerance: cfg.tolerances.hit,
        brute_force,
    };
    let rep = snell_report(&op, method, tree, &x, &options)?;
    let v0 = rep.root();
    let lambda_table = rep
        .lambda_table
        .iter()
        .map(|row| {
            Ok(LambdaEntry {
                lambda: row.lambda,
                value: row.value,
                v0,
                stop_nodes: stop_nodes(&row.rule),
                identity_gap: verify_value_identity(&op, tree, &x, &rep.v, row.lambda)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let sm = supermartingale_check(&op, tree, &rep.v)?;
    let cands = dominating_candidates(&op, tree, &x, &rep.v)?;
    let mini = minimality_check(&op, tree, &x, &rep.v, &cands)?;
    let sc = stopper_controller_value(&f.g, &f.phi, &x, tree, sched, s)?;
    let result = StopResult {
        method: method.label(),
        level: rep.level,
        v0,
        x0: x[0],
        lambda_table,
        tau_star: RuleSummary {
            stop_nodes: stop_nodes(&rep.tau_star),
            value: rep.tau_star_value,
        },
        tau_bar: TauBarSummary {
            stop_nodes: stop_nodes(&rep.tau_bar.rule),
            value: rep.tau_bar_value,
            stabilization_index: rep.tau_bar.stabilization_index,
            stabilized: rep.tau_bar.stabilized,
            monotone: rep.tau_bar.monotone,
            dominated_by_tau_star: rep.tau_bar.dominated_by_tau_star,
            endpoint_gap: (rep.tau_bar_value - v0).abs(),
        },
        supermartingale: SupermartingaleSummary {
            passed: sm.passed(),
            violations: sm.violations,
            pairs_checked: sm.pairs_checked,
            worst_violation: sm.worst_violation,
            worst_at: sm.location,
        },
        minimality: MinimalitySummary {
            passed: mini.passed(),
            accepted: mini.accepted(),
            candidates: mini
                .outcomes
                .iter()
                .map(|(name, o)| match o {
                    CandidateOutcome::Accepted { max_excess } => CandidateRow {
                        candidate: name.clone(),
                        accepted: true,
                        max_excess: Some(*max_excess),
                        reason: None,
                    },
                    CandidateOutcome::Rejected { reason } => CandidateRow {
                        candidate: name.clone(),
                        accepted: false,
                        max_excess: None,
                        reason: Some(reason.clone()),
                    },
                })
                .collect(),
        },
        probe: rep.probe.as_ref().map(|p| ProbeSummary {
            tau_bar_equals_tau_star: p.tau_bar_equals_tau_star,
            stopped_value_is_martingale: p.stopped_value.is_martingale(1e-9),
            worst_supermartingale_excess: p.stopped_value.worst_violation,
            worst_submartingale_gap: p.stopped_value.worst_submartingale_gap,
        }),
        stopper_controller: ControllerSummary {
            levels: sc.levels.clone(),
            nondecreasing: sc.nondecreasing,
            sup: sc.sup,
            reference: sc.reference.label(),
            reference_v0: sc.reference_v0,
            gap: sc.gap,
        },
        nodes: node_rows(tree, &rep.v, Some(&x)),
    };
    Ok((result, rep.brute_force))
}

fn stop(
    cfg: &ExperimentConfig,
    f: &Functions,
    tree: &PathTree,
    s: &SolverSettings,
    sched: &PenaltySchedule,
) -> Result<StopResult, Failure> {
    Ok(stop_with(cfg, f, tree, s, sched, false)?.0)
}

fn oracle(
    cfg: &ExperimentConfig,
    f: &Functions,
    tree: &PathTree,
    s: &SolverSettings,
    sched: &PenaltySchedule,
) -> Result<OracleResult, Failure> {
    if !tree.is_path_tree() {
        return Err(ConfigError("oracle: tree.mode must be \"path\"".into()).into());
    }
    if tree.steps() > gstop_core::stopping::MAX_ENUMERATION_STEPS {
        return Err(ConfigError(format!(
            "oracle: tree.steps = {} exceeds the enumeration limit {}",
            tree.steps(),
            gstop_core::stopping::MAX_ENUMERATION_STEPS
        ))
        .into());
    }
    let (stop, bf) = stop_with(cfg, f, tree, s, sched, true)?;
    let bf = bf.expect("brute force requested");
    Ok(OracleResult {
        dp_value: stop.v0,
        brute_force_value: bf.value,
        gap: (stop.v0 - bf.value).abs(),
        rules: bf.values.len(),
        argmax_index: bf.index,
        argmax_stop_nodes: bf.rule.stop_nodes(),
        stop,
    })
}

fn verify(cfg: &ExperimentConfig, f: &Functions, tree: &PathTree, s: &SolverSettings) -> Result<VerifyResult, Failure> {
    if !tree.is_path_tree() {
        return Err(ConfigError("verify: tree.mode must be \"path\"".into()).into());
    }
    let opts = SuiteOptions {
        trials: cfg.trials,
        seed: cfg.seed,
        tolerance_direct: cfg.tolerances.suite_direct,
        tolerance_penalized: cfg.tolerances.suite_penalized,
        fixed_level: cfg.penalty.levels.as_ref().and_then(|l| l.first().copied()),
        ..SuiteOptions::default()
    };
    let rep = property_suite(&f.g, &f.phi, tree, s, &opts)?;
    Ok(VerifyResult {
        seed: rep.seed,
        trials: rep.trials,
        passed: rep.all_passed(),
        failures: rep.failures(),
        rows: rep
            .rows
            .iter()
            .map(|r| PropertyRow {
                property: r.property.name().to_string(),
                operator: r.operator.clone(),
                level: r.level,
                tolerance: r.tolerance,
                trials: r.trials,
                failures: r.failures,
                passed: r.passed(),
                worst_violation: r.worst_violation,
                worst_at: r.worst_at,
                skipped: r.skipped.clone(),
            })
            .collect(),
    })
}

fn ladder(cfg: &ExperimentConfig, f: &Functions, s: &SolverSettings) -> Result<LadderResult, Failure> {
    if matches!(cfg.terminal, Terminal::Values(_)) {
        return Err(ConfigError("ladder: terminal must be an expression (terminal.expr)".into()).into());
    }
    if cfg.ladder.steps.is_empty() {
        return Err(ConfigError("ladder.steps is empty".into()).into());
    }
    let mut rows = Vec::new();
    for &n in &cfg.ladder.steps {
        let tree = PathTree::build(cfg.tree_config(n)).map_err(|e| ConfigError(format!("ladder.steps: {e}")))?;
        let xi = terminal(cfg, &tree)?;
        let caps = caps_for(&f.g, &f.phi, &tree, s)?;
        let pen = gamma_expectation(&f.g, &f.phi, &xi, &tree, &PenaltySchedule::at_cap(caps, cfg.penalty.tolerance), s)?;
        let direct_root = if f.phi.is_z_only() {
            Some(gamma_expectation_direct(&f.g, &f.phi, &xi, &tree, s)?.root())
        } else {
            None
        };
        let x = reward(f, &tree)?;
        let reference = if f.phi.is_z_only() {
            SnellMethod::Direct
        } else {
            SnellMethod::CoupledLimit
        };
        let snell = |m: SnellMethod| -> Result<f64, Failure> {
            let op = build_operator(&f.g, &f.phi, &tree, m, s)?;
            Ok(gstop_core::stopping::snell_values(&op, &tree, &x)?.v[0])
        };
        let sp = snell(SnellMethod::CoupledLimit)?;
        let sr = snell(reference)?;
        rows.push(LadderRow {
            steps: n,
            dt: tree.dt(),
            n_max: caps.n_max,
            penalized_root: pen.root(),
            direct_root,
            gap: direct_root.map(|d| d - pen.root()),
            snell_penalized_v0: sp,
            snell_reference_v0: sr,
            snell_gap: sr - sp,
        });
    }
    let gap_nonincreasing = rows
        .iter()
        .map(|r| r.gap.map(f64::abs))
        .collect::<Option<Vec<_>>>()
        .map(|g| g.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    Ok(LadderResult { rows, gap_nonincreasing })
}

/// Exit status the command maps to once it has produced a report.
pub fn verdict(report: &RunReport) -> Option<Failure> {
    match &report.results {
        Results::Verify(v) if !v.passed => Some(Failure::Property(format!(
            "property suite: {} failing trial(s) across {} row(s)",
            v.failures,
            v.rows.iter().filter(|r| !r.passed).count()
        ))),
        _ => None,
    }
}
