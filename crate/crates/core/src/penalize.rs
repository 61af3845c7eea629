//! The constrained expectation `E_t^{g,phi}(xi)`: the minimal supersolution whose
//! `(t, y, z)` stays in `{phi = 0}`.
//!
//! Two routes are provided:
//!
//! * penalization, solving the unconstrained equation for `g_n = g + n phi` along an
//!   increasing schedule of `n`;
//! * a direct one-step minimization over the zero set of a `z`-only constraint, which
//!   gives the exact discrete minimal supersolution and serves as the oracle.
//!
//! At a fixed `dt` the penalized scheme can only be pushed to the point where it stays
//! monotone, `|d_z g + n d_z phi| sqrt(dt) <= 1`, and where the Picard map contracts,
//! `dt (M_g,y + n M_phi,y) <= 1/2`. The `n -> infinity` limit is therefore reached
//! only along a refinement ladder where `dt` shrinks together with the cap.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bsde::{self, backward_full, backward_values, leaf_vector, picard, BsdeOperator, BsdeSolution, OneStep, Pass, SolverSettings, Step};
use crate::expr::{check_structure, BinOp, Expr, FunctionSpec, Lipschitz, ProbeGrid, Signature, Var, STRUCTURE_TOLERANCE};
use crate::lattice::{AdaptedProcess, NodeId, PathTree};
use crate::{Error, Result};

/// Level used when the constraint imposes no stability cap (e.g. `phi = 0`).
pub const UNBOUNDED_LEVEL: f64 = 1024.0;
pub const DEFAULT_CONVERGENCE_TOLERANCE: f64 = 1e-8;
/// Golden-section termination width in `z`.
pub const Z_SEARCH_TOLERANCE: f64 = 1e-10;
const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// `g + n phi`, carrying `M_g + n M_phi` when both bounds are declared.
pub fn penalized_generator(g: &FunctionSpec, phi: &FunctionSpec, n: f64) -> FunctionSpec {
    if phi.is_zero() {
        return g.clone();
    }
    let expr = Expr::Bin(
        BinOp::Add,
        alloc::boxed::Box::new(g.expr().clone()),
        alloc::boxed::Box::new(Expr::Bin(
            BinOp::Mul,
            alloc::boxed::Box::new(Expr::Num(n)),
            alloc::boxed::Box::new(phi.expr().clone()),
        )),
    );
    let spec = FunctionSpec::from_expr(expr, Signature::Driver);
    match (g.declared_lipschitz(), phi.declared_lipschitz()) {
        (Some(lg), Some(lp)) => spec.with_lipschitz(Lipschitz {
            y: lg.y + n * lp.y,
            z: lg.z + n * lp.z,
        }),
        _ => spec,
    }
}

/// Largest penalty levels compatible with the scheme at a given `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityCaps {
    /// From `dt (M_g,y + n M_phi,y) <= contraction_limit`.
    pub contraction: f64,
    /// From `|d_z g + n d_z phi| sqrt(dt) <= 1`.
    pub monotone: f64,
    pub n_max: f64,
    /// False when neither condition bounds `n`.
    pub bounded: bool,
}

pub fn stability_caps(g_lip: Lipschitz, phi_lip: Lipschitz, dt: f64, contraction_limit: f64) -> Result<StabilityCaps> {
    let room_y = contraction_limit / dt - g_lip.y;
    let room_z = 1.0 / libm::sqrt(dt) - g_lip.z;
    if room_y < 0.0 {
        return Err(Error::Stability(format!(
            "generator alone violates the contraction cap: dt * M_y = {} > {contraction_limit}",
            dt * g_lip.y
        )));
    }
    if room_z < 0.0 {
        return Err(Error::Stability(format!(
            "generator alone violates the monotone cap: M_z * sqrt(dt) = {} > 1",
            g_lip.z * libm::sqrt(dt)
        )));
    }
    let cap = |room: f64, slope: f64| if slope > 0.0 { room / slope } else { f64::INFINITY };
    let contraction = cap(room_y, phi_lip.y);
    let monotone = cap(room_z, phi_lip.z);
    let n = contraction.min(monotone);
    Ok(StabilityCaps {
        contraction,
        monotone,
        n_max: if n.is_finite() { n } else { UNBOUNDED_LEVEL },
        bounded: n.is_finite(),
    })
}

/// Largest `n` for which `g + n phi` keeps the scheme monotone, i.e.
/// `|d_z g + n d_z phi| sqrt(dt) <= 1` for every z-slope sampled on the probe grid.
///
/// Using signed slopes rather than `M_g,z + n M_phi,z` matters when the slopes of `g`
/// and `phi` partly cancel: for `g = b z` and `phi = neg(z)` the cap is `1/sqrt(dt) + b`,
/// and at that level the penalized step coincides with the exact minimization.
pub fn monotone_cap(g: &FunctionSpec, phi: &FunctionSpec, horizon: f64, dt: f64) -> Result<f64> {
    let grid = ProbeGrid::default_for(horizon);
    let ys = ProbeGrid::axis(grid.y_range, grid.points);
    let zs = ProbeGrid::axis(grid.z_range, grid.points);
    let limit = 1.0 / libm::sqrt(dt);
    let mut cap = f64::INFINITY;
    let mut floor: f64 = 0.0;
    for &t in &grid.times {
        for &y in &ys {
            let eval = |f: &FunctionSpec, z: f64| {
                f.eval_driver(t, y, z).map_err(|source| Error::Probe { t, y, z, source })
            };
            for w in zs.windows(2) {
                let h = w[1] - w[0];
                let sg = (eval(g, w[1])? - eval(g, w[0])?) / h;
                let sp = (eval(phi, w[1])? - eval(phi, w[0])?) / h;
                if libm::fabs(sp) < 1e-14 {
                    if libm::fabs(sg) > limit * (1.0 + 1e-12) {
                        return Err(Error::Stability(format!(
                            "generator alone violates the monotone cap: z-slope {sg} exceeds 1/sqrt(dt) = {limit} near t = {t}, y = {y}, z = {}",
                            w[0]
                        )));
                    }
                    continue;
                }
                let (lo, hi) = if sp > 0.0 {
                    ((-limit - sg) / sp, (limit - sg) / sp)
                } else {
                    ((sg - limit) / -sp, (limit + sg) / -sp)
                };
                cap = cap.min(hi);
                floor = floor.max(lo);
            }
        }
    }
    if floor > cap {
        return Err(Error::Stability(format!(
            "no penalty level keeps the scheme monotone at dt = {dt} (needs n >= {floor} and n <= {cap})"
        )));
    }
    Ok(cap)
}

/// Caps for `(g, phi)` on `tree`: the contraction cap from declared or estimated
/// `y`-Lipschitz constants, the monotone cap from sampled `z`-slopes.
pub fn caps_for(g: &FunctionSpec, phi: &FunctionSpec, tree: &PathTree, settings: &SolverSettings) -> Result<StabilityCaps> {
    let lg = g.lipschitz_on(tree.horizon())?;
    let lp = phi.lipschitz_on(tree.horizon())?;
    let dt = tree.dt();
    let room_y = settings.contraction_limit / dt - lg.y;
    if room_y < 0.0 {
        return Err(Error::Stability(format!(
            "generator alone violates the contraction cap: dt * M_y = {} > {}",
            dt * lg.y,
            settings.contraction_limit
        )));
    }
    let contraction = if lp.y > 0.0 { room_y / lp.y } else { f64::INFINITY };
    let monotone = monotone_cap(g, phi, tree.horizon(), dt)?;
    let n = contraction.min(monotone);
    Ok(StabilityCaps {
        contraction,
        monotone,
        n_max: if n.is_finite() { n } else { UNBOUNDED_LEVEL },
        bounded: n.is_finite(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySchedule {
    pub levels: Vec<f64>,
    pub caps: StabilityCaps,
    /// Stop once successive levels differ by less than this in sup norm.
    pub tolerance: f64,
}

impl PenaltySchedule {
    /// `1, 2, 4, ...` below the cap, then the cap itself.
    pub fn geometric(caps: StabilityCaps, tolerance: f64) -> Self {
        let mut levels = Vec::new();
        let mut n = 1.0;
        while n < caps.n_max {
            levels.push(n);
            n *= 2.0;
        }
        levels.push(caps.n_max);
        PenaltySchedule {
            levels,
            caps,
            tolerance,
        }
    }

    /// The single level `n_max`.
    pub fn at_cap(caps: StabilityCaps, tolerance: f64) -> Self {
        PenaltySchedule {
            levels: vec![caps.n_max],
            caps,
            tolerance,
        }
    }

    pub fn with_levels(levels: Vec<f64>, caps: StabilityCaps, tolerance: f64) -> Result<Self> {
        let s = PenaltySchedule {
            levels,
            caps,
            tolerance,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn for_problem(g: &FunctionSpec, phi: &FunctionSpec, tree: &PathTree, settings: &SolverSettings) -> Result<Self> {
        Ok(Self::geometric(caps_for(g, phi, tree, settings)?, DEFAULT_CONVERGENCE_TOLERANCE))
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("penalty schedule is empty".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("penalty.tolerance must be positive".into()));
        }
        for w in self.levels.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Config(format!(
                    "penalty levels must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if !(self.levels[0] > 0.0) {
            return Err(Error::Config("penalty levels must be positive".into()));
        }
        let top = *self.levels.last().expect("non-empty");
        if top > self.caps.n_max * (1.0 + 1e-12) {
            return Err(Error::Stability(format!(
                "penalty level {top} exceeds the stability cap {} (contraction {}, monotone {})",
                self.caps.n_max, self.caps.contraction, self.caps.monotone
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Penalized,
    Direct,
}

/// One row of the penalization convergence table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelRecord {
    pub n: f64,
    pub root: f64,
    /// `max phi(t, y^n, z^n)` over non-leaf nodes.
    pub max_violation: f64,
    /// Sup-norm distance to the previous level's solution.
    pub gap_to_previous: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaSolution {
    pub method: Method,
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
    /// Increments of `C` relative to `g` on the `[up, down]` edges of each node.
    pub dc: Vec<[f64; 2]>,
    pub levels: Vec<LevelRecord>,
    /// `y^n` for every level that was solved.
    pub snapshots: Vec<AdaptedProcess>,
    pub converged: bool,
    pub caps: Option<StabilityCaps>,
}

impl GammaSolution {
    pub fn root(&self) -> f64 {
        self.y[0]
    }

    pub fn as_bsde_solution(&self) -> BsdeSolution {
        BsdeSolution {
            y: self.y.clone(),
            z: self.z.clone(),
            dc: self.dc.clone(),
            iterations: vec![0; self.y.len()],
        }
    }
}

/// Fails with a domain error unless `phi(t, y, 0) = 0` on the probe grid.
pub fn require_a3(phi: &FunctionSpec, horizon: f64) -> Result<()> {
    let report = check_structure(phi, &ProbeGrid::default_for(horizon))?;
    if report.a3_holds {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "constraint `{}` violates phi(t, y, 0) = 0 (max |phi(t, y, 0)| = {} on the probe grid); \
             the constrained expectation is not defined on all bounded terminals",
            phi.source(),
            report.zero_slice_max
        )))
    }
}

fn max_violation(phi: &FunctionSpec, tree: &PathTree, sol: &BsdeSolution) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for level in 0..tree.steps() {
        let t = tree.level_time(level);
        for node in tree.level_nodes(level) {
            let v = phi
                .eval_driver(t, sol.y[node], sol.z[node])
                .map_err(|source| Error::Eval { node, source })?;
            worst = worst.max(v);
        }
    }
    Ok(worst)
}

/// Penalization route: solves for `g + n phi` along the schedule.
pub fn gamma_expectation(
    g: &FunctionSpec,
    phi: &FunctionSpec,
    terminal: &[f64],
    tree: &PathTree,
    schedule: &PenaltySchedule,
    settings: &SolverSettings,
) -> Result<GammaSolution> {
    require_a3(phi, tree.horizon())?;
    schedule.validate()?;
    let init = leaf_vector(tree, terminal)?;
    let mut levels = Vec::new();
    let mut snapshots: Vec<AdaptedProcess> = Vec::new();
    let mut last: Option<(f64, BsdeSolution)> = None;
    let mut converged = false;
    for &n in &schedule.levels {
        let op = BsdeOperator::new(penalized_generator(g, phi, n), tree, *settings)?;
        let sol = backward_full(&op, tree, Pass::from_leaves(tree, &init))?;
        let gap = snapshots.last().map(|prev| prev.max_abs_diff(&sol.y));
        levels.push(LevelRecord {
            n,
            root: sol.y[0],
            max_violation: max_violation(phi, tree, &sol)?,
            gap_to_previous: gap,
        });
        snapshots.push(sol.y.clone());
        last = Some((n, sol));
        if gap.is_some_and(|d| d < schedule.tolerance) {
            converged = true;
            break;
        }
    }
    let (n, sol) = last.expect("schedule is non-empty");
    // Relative to g, the penalty term is the increment of C.
    let dt = tree.dt();
    let mut dc = vec![[0.0; 2]; tree.len()];
    for level in 0..tree.steps() {
        let t = tree.level_time(level);
        for node in tree.level_nodes(level) {
            let p = phi
                .eval_driver(t, sol.y[node], sol.z[node])
                .map_err(|source| Error::Eval { node, source })?;
            let inc = if phi.is_zero() { 0.0 } else { n * p * dt };
            dc[node] = [inc, inc];
        }
    }
    Ok(GammaSolution {
        method: Method::Penalized,
        y: sol.y,
        z: sol.z,
        dc,
        levels,
        snapshots,
        converged,
        caps: Some(schedule.caps),
    })
}

/// Zero set `{z : phi(t, z) = 0}` as an interval, assuming it is one (convex `phi`).
fn zero_interval(phi: &FunctionSpec, t: f64) -> Option<(f64, f64)> {
    let feasible = |z: f64| phi.eval_driver(t, 0.0, z).is_ok_and(|v| v <= 0.0);
    let mut probes: Vec<f64> = vec![0.0];
    for k in -3..=6 {
        let p = libm::pow(10.0, k as f64);
        for s in [1.0, 2.0, 5.0] {
            probes.push(s * p);
            probes.push(-s * p);
        }
    }
    probes.sort_by(f64::total_cmp);
    let ok: Vec<bool> = probes.iter().map(|&z| feasible(z)).collect();
    let first = ok.iter().position(|&b| b)?;
    let last = ok.iter().rposition(|&b| b)?;
    let refine = |mut inside: f64, mut outside: f64| {
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if mid == inside || mid == outside {
                break;
            }
            if feasible(mid) {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    let lo = if first == 0 {
        f64::NEG_INFINITY
    } else {
        refine(probes[first], probes[first - 1])
    };
    let hi = if last + 1 == probes.len() {
        f64::INFINITY
    } else {
        refine(probes[last], probes[last + 1])
    };
    Some((lo, hi))
}

/// Exact discrete minimal supersolution step for a `z`-only constraint.
#[derive(Debug, Clone)]
pub struct DirectOperator {
    g: FunctionSpec,
    g_uses_y: bool,
    phi: FunctionSpec,
    /// Zero set of `phi(t_level, .)`; one entry when `phi` does not depend on `t`.
    zero_sets: Vec<Option<(f64, f64)>>,
    dt: f64,
    sqrt_dt: f64,
    settings: SolverSettings,
}

impl DirectOperator {
    pub fn new(g: FunctionSpec, phi: FunctionSpec, tree: &PathTree, settings: SolverSettings) -> Result<Self> {
        if phi.signature() != Signature::Driver {
            return Err(Error::Signature {
                expected: Signature::Driver,
                found: phi.signature(),
            });
        }
        if !phi.is_z_only() {
            return Err(Error::Config(format!(
                "the direct method needs a constraint that depends on z only, got `{}`",
                phi.source()
            )));
        }
        // Reuses the unconstrained constructor for the contraction guard on g.
        let g_uses_y = BsdeOperator::new(g.clone(), tree, settings)?.generator().references(Var::Y);
        let zero_sets = if phi.references(Var::T) {
            (0..=tree.steps()).map(|l| zero_interval(&phi, tree.level_time(l))).collect()
        } else {
            vec![zero_interval(&phi, 0.0)]
        };
        Ok(DirectOperator {
            g,
            g_uses_y,
            phi,
            zero_sets,
            dt: tree.dt(),
            sqrt_dt: tree.sqrt_dt(),
            settings,
        })
    }

    pub fn constraint(&self) -> &FunctionSpec {
        &self.phi
    }

    fn zero_set(&self, level: usize) -> Option<(f64, f64)> {
        if self.zero_sets.len() == 1 {
            self.zero_sets[0]
        } else {
            self.zero_sets[level]
        }
    }

    fn solve_at(&self, node: NodeId, t: f64, zero_set: Option<(f64, f64)>, y_up: f64, y_down: f64) -> Result<Step> {
        let s = self.sqrt_dt;
        let bracket = 10.0 * (1.0 + libm::fabs(y_up - y_down) / s);
        let Some((zl, zh)) = zero_set else {
            return Err(Error::Infeasible {
                node,
                reason: format!("constraint `{}` has no zero at t = {t}", self.phi.source()),
            });
        };
        let lo = zl.max(-bracket);
        let hi = zh.min(bracket);
        if lo > hi {
            return Err(Error::Infeasible {
                node,
                reason: format!("zero set [{zl}, {zh}] misses the search bracket [-{bracket}, {bracket}]"),
            });
        }
        let mut evals = 0u32;
        let mut objective = |z: f64| -> Result<f64> {
            evals += 1;
            let base = (y_up - z * s).max(y_down + z * s);
            Ok(picard(&self.g, self.g_uses_y, node, t, base, z, self.dt, &self.settings)?.0)
        };

        let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(8);
        if hi > lo {
            let (mut a, mut b) = (lo, hi);
            let mut c = b - GOLDEN * (b - a);
            let mut d = a + GOLDEN * (b - a);
            let mut fc = objective(c)?;
            let mut fd = objective(d)?;
            while b - a > Z_SEARCH_TOLERANCE {
                if fc <= fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - GOLDEN * (b - a);
                    fc = objective(c)?;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + GOLDEN * (b - a);
                    fd = objective(d)?;
                }
            }
            candidates.push((c, fc));
            candidates.push((d, fd));
        }
        // Piecewise-linear objectives attain their minimum at a kink or an endpoint.
        let kink = (y_up - y_down) / (2.0 * s);
        for z in [kink.clamp(lo, hi), 0.0f64.clamp(lo, hi), lo, hi] {
            candidates.push((z, objective(z)?));
        }
        let best = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        let slack = 1e-14 * (1.0 + libm::fabs(best));
        let (z, _) = candidates
            .iter()
            .filter(|c| c.1 <= best + slack)
            .min_by(|a, b| libm::fabs(a.0).total_cmp(&libm::fabs(b.0)))
            .copied()
            .expect("at least one candidate");
        let base = (y_up - z * s).max(y_down + z * s);
        let (y, _) = picard(&self.g, self.g_uses_y, node, t, base, z, self.dt, &self.settings)?;
        let gdt = self
            .g
            .eval_driver(t, y, z)
            .map_err(|source| Error::Eval { node, source })?
            * self.dt;
        Ok(Step {
            y,
            z,
            dc_up: y - y_up - gdt + z * s,
            dc_down: y - y_down - gdt - z * s,
            iterations: evals,
        })
    }
}

impl OneStep for DirectOperator {
    fn step(&self, node: NodeId, level: usize, y_up: f64, y_down: f64) -> Result<Step> {
        let t = level as f64 * self.dt;
        self.solve_at(node, t, self.zero_set(level), y_up, y_down)
    }
}

/// One direct minimization step from child values `(y_up, y_down)` at time `t`.
pub fn direct_one_step(
    g: &FunctionSpec,
    phi_z: &FunctionSpec,
    children: (f64, f64),
    t: f64,
    dt: f64,
    settings: &SolverSettings,
) -> Result<Step> {
    let tree = PathTree::build(crate::lattice::TreeConfig::path_tree(1, dt))?;
    let op = DirectOperator::new(g.clone(), phi_z.clone(), &tree, *settings)?;
    op.solve_at(0, t, zero_interval(phi_z, t), children.0, children.1)
}

/// Direct route: backward induction with [`DirectOperator`].
pub fn gamma_expectation_direct(
    g: &FunctionSpec,
    phi_z: &FunctionSpec,
    terminal: &[f64],
    tree: &PathTree,
    settings: &SolverSettings,
) -> Result<GammaSolution> {
    let op = DirectOperator::new(g.clone(), phi_z.clone(), tree, *settings)?;
    let init = leaf_vector(tree, terminal)?;
    let sol = backward_full(&op, tree, Pass::from_leaves(tree, &init))?;
    Ok(GammaSolution {
        method: Method::Direct,
        y: sol.y,
        z: sol.z,
        dc: sol.dc,
        levels: Vec::new(),
        snapshots: Vec::new(),
        converged: true,
        caps: None,
    })
}

/// A one-step constrained-expectation operator: penalized at a fixed level, or direct.
#[derive(Debug, Clone)]
pub enum GammaOperator {
    Penalized { n: f64, op: BsdeOperator },
    Direct(DirectOperator),
}

impl GammaOperator {
    pub fn penalized(g: &FunctionSpec, phi: &FunctionSpec, n: f64, tree: &PathTree, settings: &SolverSettings) -> Result<Self> {
        Ok(GammaOperator::Penalized {
            n,
            op: BsdeOperator::new(penalized_generator(g, phi, n), tree, *settings)?,
        })
    }

    pub fn direct(g: &FunctionSpec, phi: &FunctionSpec, tree: &PathTree, settings: &SolverSettings) -> Result<Self> {
        Ok(GammaOperator::Direct(DirectOperator::new(g.clone(), phi.clone(), tree, *settings)?))
    }

    pub fn label(&self) -> String {
        match self {
            GammaOperator::Penalized { n, .. } => format!("penalized(n={n})"),
            GammaOperator::Direct(_) => "direct".to_string(),
        }
    }

    pub fn level(&self) -> Option<f64> {
        match self {
            GammaOperator::Penalized { n, .. } => Some(*n),
            GammaOperator::Direct(_) => None,
        }
    }
}

impl OneStep for GammaOperator {
    #[inline]
    fn step(&self, node: NodeId, level: usize, y_up: f64, y_down: f64) -> Result<Step> {
        match self {
            GammaOperator::Penalized { op, .. } => op.step(node, level, y_up, y_down),
            GammaOperator::Direct(op) => op.step(node, level, y_up, y_down),
        }
    }
}

/// `E_t(xi)` at every node for leaf values `terminal`.
pub fn expectation<O: OneStep>(op: &O, tree: &PathTree, terminal: &[f64]) -> Result<Vec<f64>> {
    let init = leaf_vector(tree, terminal)?;
    backward_values(op, tree, Pass::from_leaves(tree, &init))
}

/// `E_s(P_level)` for `s <= level`, where `values` holds `P` at the nodes of `level`.
pub fn expectation_from_level<O: OneStep>(op: &O, tree: &PathTree, level: usize, values: &[f64]) -> Result<Vec<f64>> {
    backward_values(
        op,
        tree,
        Pass {
            init: values,
            start_level: level,
            frozen: None,
            skip: None,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Property {
    Comparison,
    Convexity,
    ContinuityFromBelow,
    SelfPreserving,
    TimeConsistency,
    ZeroOneLaw,
}

impl Property {
    pub const ALL: [Property; 6] = [
        Property::Comparison,
        Property::Convexity,
        Property::ContinuityFromBelow,
        Property::SelfPreserving,
        Property::TimeConsistency,
        Property::ZeroOneLaw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::Comparison => "comparison",
            Property::Convexity => "convexity",
            Property::ContinuityFromBelow => "continuity_from_below",
            Property::SelfPreserving => "self_preserving",
            Property::TimeConsistency => "time_consistency",
            Property::ZeroOneLaw => "zero_one_law",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyRow {
    pub property: Property,
    pub operator: String,
    pub level: Option<f64>,
    pub tolerance: f64,
    pub trials: usize,
    pub failures: usize,
    pub worst_violation: f64,
    /// `(trial, node)` of the worst violation.
    pub worst_at: Option<(usize, NodeId)>,
    pub skipped: Option<String>,
}

impl PropertyRow {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub seed: u64,
    pub trials: usize,
    pub rows: Vec<PropertyRow>,
}

impl PropertyReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(PropertyRow::passed)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().map(|r| r.failures).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub trials: usize,
    pub seed: u64,
    pub tolerance_direct: f64,
    pub tolerance_penalized: f64,
    /// The fixed level every identity is first checked at; defaults to the first
    /// scheduled level.
    pub fixed_level: Option<f64>,
    /// `xi_k = xi - 2^-k tail` for `k = 0..=continuity_steps`.
    pub continuity_steps: u32,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            trials: 200,
            seed: 0,
            tolerance_direct: 1e-9,
            tolerance_penalized: 1e-7,
            fixed_level: None,
            continuity_steps: 36,
        }
    }
}

/// Worst violation tracker for one (operator, property) row.
struct Tally {
    tol: f64,
    failures: usize,
    worst: f64,
    at: Option<(usize, NodeId)>,
}

impl Tally {
    fn new(tol: f64) -> Self {
        Tally {
            tol,
            failures: 0,
            worst: 0.0,
            at: None,
        }
    }

    /// Records one trial given `(node, violation)` pairs, where violation > tol fails.
    fn trial(&mut self, trial: usize, violations: impl IntoIterator<Item = (NodeId, f64)>) {
        let mut worst = (0, 0.0f64);
        for (node, v) in violations {
            if v > worst.1 || v.is_nan() {
                worst = (node, if v.is_nan() { f64::INFINITY } else { v });
            }
        }
        if worst.1 > self.tol {
            self.failures += 1;
        }
        if worst.1 > self.worst || self.at.is_none() {
            self.worst = self.worst.max(worst.1);
            self.at = Some((trial, worst.0));
        }
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

fn property_seed(seed: u64, p: Property) -> u64 {
    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(p as u64 + 1))
}

/// Randomized checks of comparison, convexity, continuity from below, self-preservation,
/// time consistency and the zero-one law, for the penalized operator at a fixed level,
/// at the schedule limit, and (for `z`-only constraints) the direct operator.
pub fn property_suite(
    g: &FunctionSpec,
    phi: &FunctionSpec,
    tree: &PathTree,
    settings: &SolverSettings,
    options: &SuiteOptions,
) -> Result<PropertyReport> {
    tree.require_path_tree("the property suite")?;
    require_a3(phi, tree.horizon())?;
    let schedule = PenaltySchedule::for_problem(g, phi, tree, settings)?;
    let fixed = options.fixed_level.unwrap_or(schedule.levels[0]);
    let mut operators: Vec<(GammaOperator, f64)> = vec![(
        GammaOperator::penalized(g, phi, fixed, tree, settings)?,
        options.tolerance_penalized,
    )];
    if schedule.caps.n_max != fixed {
        operators.push((
            GammaOperator::penalized(g, phi, schedule.caps.n_max, tree, settings)?,
            options.tolerance_penalized,
        ));
    }
    if phi.is_z_only() {
        operators.push((GammaOperator::direct(g, phi, tree, settings)?, options.tolerance_direct));
    }

    let grid = ProbeGrid::default_for(tree.horizon());
    let g_report = check_structure(g, &grid)?;
    let phi_report = check_structure(phi, &grid)?;
    let convex = g_report.convex() && phi_report.convex();
    let self_preserving = g_report.zero_slice_max <= STRUCTURE_TOLERANCE;

    let mut rows = Vec::new();
    for (op, tol) in &operators {
        for property in Property::ALL {
            let skipped = match property {
                Property::Convexity if !convex => Some("requires g and phi convex in (y, z)".to_string()),
                Property::SelfPreserving if !self_preserving => {
                    Some("requires g(t, y, 0) = 0 on the probe grid".to_string())
                }
                _ => None,
            };
            let mut tally = Tally::new(*tol);
            if skipped.is_none() {
                let mut rng = ChaCha8Rng::seed_from_u64(property_seed(options.seed, property));
                for trial in 0..options.trials {
                    run_trial(op, tree, property, trial, &mut rng, options, &mut tally)?;
                }
            }
            rows.push(PropertyRow {
                property,
                operator: op.label(),
                level: op.level(),
                tolerance: *tol,
                trials: if skipped.is_some() { 0 } else { options.trials },
                failures: tally.failures,
                worst_violation: tally.worst,
                worst_at: tally.at,
                skipped,
            });
        }
    }
    Ok(PropertyReport {
        seed: options.seed,
        trials: options.trials,
        rows,
    })
}

fn run_trial(
    op: &GammaOperator,
    tree: &PathTree,
    property: Property,
    trial: usize,
    rng: &mut ChaCha8Rng,
    options: &SuiteOptions,
    tally: &mut Tally,
) -> Result<()> {
    let leaves = tree.leaves();
    let n_leaves = leaves.len();
    let xi = uniform_vec(rng, n_leaves, -1.0, 1.0);
    let all = 0..tree.len();
    match property {
        Property::Comparison => {
            let bump: Vec<f64> = uniform_vec(rng, n_leaves, -0.5, 1.0).into_iter().map(|v| v.max(0.0)).collect();
            let eta: Vec<f64> = xi.iter().zip(&bump).map(|(a, b)| a + b).collect();
            let ex = expectation(op, tree, &xi)?;
            let ee = expectation(op, tree, &eta)?;
            tally.trial(trial, all.map(|n| (n, ex[n] - ee[n])));
        }
        Property::Convexity => {
            let eta = uniform_vec(rng, n_leaves, -1.0, 1.0);
            let ex = expectation(op, tree, &xi)?;
            let ee = expectation(op, tree, &eta)?;
            let mut v = Vec::new();
            for a in [0.25, 0.5, 0.75] {
                let mix: Vec<f64> = xi.iter().zip(&eta).map(|(x, e)| a * x + (1.0 - a) * e).collect();
                let em = expectation(op, tree, &mix)?;
                v.extend(all.clone().map(|n| (n, em[n] - (a * ex[n] + (1.0 - a) * ee[n]))));
            }
            tally.trial(trial, v);
        }
        Property::ContinuityFromBelow => {
            let tail = uniform_vec(rng, n_leaves, 0.0, 1.0);
            let target = expectation(op, tree, &xi)?;
            let mut prev: Option<Vec<f64>> = None;
            let mut v = Vec::new();
            for k in 0..=options.continuity_steps {
                let scale = libm::ldexp(1.0, -(k as i32));
                let xk: Vec<f64> = xi.iter().zip(&tail).map(|(x, r)| x - scale * r).collect();
                let ek = expectation(op, tree, &xk)?;
                if let Some(p) = &prev {
                    v.extend(all.clone().map(|n| (n, p[n] - ek[n])));
                }
                prev = Some(ek);
            }
            let last = prev.expect("at least one step");
            v.extend(all.clone().map(|n| (n, libm::fabs(target[n] - last[n]))));
            tally.trial(trial, v);
        }
        Property::SelfPreserving => {
            let level = rng.random_range(0..=tree.steps());
            let values = uniform_vec(rng, tree.level_nodes(level).len(), -1.0, 1.0);
            let start = tree.level_nodes(level).start;
            let xi_t: Vec<f64> = leaves.clone().map(|l| values[tree.ancestor_at(l, level) - start]).collect();
            let e = expectation(op, tree, &xi_t)?;
            let v = (level..=tree.steps()).flat_map(|l| tree.level_nodes(l)).map(|n| {
                let expected = values[tree.ancestor_at(n, level) - start];
                (n, libm::fabs(e[n] - expected))
            });
            tally.trial(trial, v.collect::<Vec<_>>());
        }
        Property::TimeConsistency => {
            let level = rng.random_range(0..=tree.steps());
            let full = expectation(op, tree, &xi)?;
            let mut init = vec![f64::NAN; tree.len()];
            for n in tree.level_nodes(level) {
                init[n] = full[n];
            }
            let nested = expectation_from_level(op, tree, level, &init)?;
            let v = (0..=level).flat_map(|l| tree.level_nodes(l)).map(|n| (n, libm::fabs(nested[n] - full[n])));
            tally.trial(trial, v.collect::<Vec<_>>());
        }
        Property::ZeroOneLaw => {
            let level = rng.random_range(0..=tree.steps());
            let in_event: Vec<bool> = tree.level_nodes(level).map(|_| rng.random_bool(0.5)).collect();
            let start = tree.level_nodes(level).start;
            let indicator = |n: NodeId| in_event[tree.ancestor_at(n, level) - start];
            let restricted: Vec<f64> = leaves
                .clone()
                .zip(&xi)
                .map(|(l, x)| if indicator(l) { *x } else { 0.0 })
                .collect();
            let e = expectation(op, tree, &xi)?;
            let er = expectation(op, tree, &restricted)?;
            let v = (level..=tree.steps()).flat_map(|l| tree.level_nodes(l)).map(|n| {
                let expected = if indicator(n) { e[n] } else { 0.0 };
                (n, libm::fabs(er[n] - expected))
            });
            tally.trial(trial, v.collect::<Vec<_>>());
        }
    }
    Ok(())
}

/// Re-exported so callers can build one-step operators without importing `bsde`.
pub use bsde::OneStep as OneStepOperator;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::catalog;
    use crate::lattice::{realize_terminal, TreeConfig};

    fn drv(s: &str) -> FunctionSpec {
        FunctionSpec::driver(s).unwrap()
    }

    fn tree(n: usize, t: f64) -> PathTree {
        PathTree::build(TreeConfig::path_tree(n, t)).unwrap()
    }

    fn leaves(tree: &PathTree, src: &str) -> Vec<f64> {
        realize_terminal(&FunctionSpec::reward(src).unwrap(), tree).unwrap()
    }

    fn single_level(n: f64) -> PenaltySchedule {
        let caps = StabilityCaps {
            contraction: f64::INFINITY,
            monotone: n,
            n_max: n,
            bounded: true,
        };
        PenaltySchedule::at_cap(caps, DEFAULT_CONVERGENCE_TOLERANCE)
    }

    #[test]
    fn penalized_generator_examples() {
        let g = penalized_generator(&drv("0"), &drv("abs(z)"), 3.0);
        assert_eq!(g.eval_driver(0.0, 0.0, 2.0).unwrap(), 6.0);
        let g = penalized_generator(&drv("y"), &drv("0"), 10.0);
        assert_eq!(g.canonical(), "y");
        let g = penalized_generator(&drv("0"), &drv("neg(z)"), 1.0);
        assert_eq!(g.eval_driver(0.0, 0.0, -1.0).unwrap(), 1.0);
        let gs = catalog::generators();
        let ps = catalog::constraints();
        let g = penalized_generator(&gs[3].spec, &ps[1].spec, 4.0);
        assert_eq!(g.declared_lipschitz(), Some(Lipschitz { y: 0.5, z: 4.5 }));
    }

    #[test]
    fn caps_follow_dt() {
        let caps = stability_caps(Lipschitz { y: 0.0, z: 0.0 }, Lipschitz { y: 0.0, z: 1.0 }, 0.25, 0.5).unwrap();
        assert_eq!(caps.monotone, 2.0);
        assert_eq!(caps.contraction, f64::INFINITY);
        assert_eq!(caps.n_max, 2.0);
        let caps = stability_caps(Lipschitz { y: 0.5, z: 0.5 }, Lipschitz { y: 1.0, z: 1.0 }, 1.0 / 16.0, 0.5).unwrap();
        assert_eq!(caps.contraction, 7.5);
        assert_eq!(caps.monotone, 3.5);
        assert!(stability_caps(Lipschitz { y: 0.0, z: 3.0 }, Lipschitz::default(), 1.0, 0.5).is_err());
        let free = stability_caps(Lipschitz::default(), Lipschitz::default(), 0.1, 0.5).unwrap();
        assert!(!free.bounded);
        assert_eq!(free.n_max, UNBOUNDED_LEVEL);
        let sched = PenaltySchedule::geometric(caps, 1e-8);
        assert_eq!(sched.levels, vec![1.0, 2.0, 3.5]);
        assert!(PenaltySchedule::with_levels(vec![1.0, 4.0], caps, 1e-8).is_err());
        assert!(PenaltySchedule::with_levels(vec![2.0, 1.0], caps, 1e-8).is_err());
    }

    #[test]
    fn penalized_one_step_examples() {
        let t = tree(1, 1.0);
        let s = SolverSettings::default();
        let sol = gamma_expectation(&drv("0"), &drv("neg(z)"), &leaves(&t, "-w"), &t, &single_level(1.0), &s).unwrap();
        assert_eq!(sol.root(), 1.0);
        let sol = gamma_expectation(&drv("0"), &drv("abs(z)"), &leaves(&t, "w"), &t, &single_level(1.0), &s).unwrap();
        assert_eq!(sol.root(), 1.0);
        let r = bsde::supersolution_residual(&sol.as_bsde_solution(), &drv("0"), &t).unwrap();
        assert!(r.max_abs <= 1e-12 && r.increasing);
    }

    #[test]
    fn zero_constraint_reduces_to_unconstrained() {
        let t = tree(5, 1.0);
        let s = SolverSettings::default();
        let g = drv("0.5*abs(z) + 0.5*y");
        let xi = leaves(&t, "sqrt(1 + w*w)");
        let a = gamma_expectation(&g, &drv("0"), &xi, &t, &PenaltySchedule::for_problem(&g, &drv("0"), &t, &s).unwrap(), &s).unwrap();
        let b = bsde::solve_bsde(&g, &xi, &t, &s).unwrap();
        assert_eq!(a.y, b.y);
        assert!(a.converged);
        let d = gamma_expectation_direct(&g, &drv("0"), &xi, &t, &s).unwrap();
        assert!(d.y.max_abs_diff(&b.y) < 1e-12);
    }

    #[test]
    fn a3_failure_is_a_domain_error() {
        let t = tree(2, 1.0);
        let err = gamma_expectation(&drv("0"), &drv("abs(z)+1"), &[0.0; 4], &t, &single_level(1.0), &SolverSettings::default())
            .unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains("phi(t, y, 0) = 0")), "{err}");
    }

    #[test]
    fn direct_one_step_examples() {
        let s = SolverSettings::default();
        let st = direct_one_step(&drv("0"), &drv("abs(z)"), (1.0, -1.0), 0.0, 1.0, &s).unwrap();
        assert_eq!((st.y, st.z), (1.0, 0.0));
        let st = direct_one_step(&drv("0"), &drv("neg(z)"), (-1.0, 1.0), 0.0, 1.0, &s).unwrap();
        assert_eq!((st.y, st.z), (1.0, 0.0));
        assert!(st.dc_up >= 0.0 && st.dc_down >= 0.0);
        // Unconstrained: the minimizer is the martingale-representation z with dC = 0.
        let st = direct_one_step(&drv("0.5*abs(z)"), &drv("0"), (3.0, 1.0), 0.0, 0.25, &s).unwrap();
        assert!((st.z - 2.0).abs() < 1e-12 && (st.y - 2.25).abs() < 1e-12);
        assert!(st.dc_up.abs() < 1e-12 && st.dc_down.abs() < 1e-12);
    }

    #[test]
    fn direct_rejects_bad_constraints() {
        let t = tree(2, 1.0);
        let s = SolverSettings::default();
        assert!(matches!(DirectOperator::new(drv("0"), drv("abs(y*z)"), &t, s), Err(Error::Config(_))));
        let err = gamma_expectation_direct(&drv("0"), &drv("1 + abs(z)"), &[0.0; 4], &t, &s).unwrap_err();
        assert!(matches!(err, Error::Infeasible { node: 1, .. }), "{err}");
        // Zero set {z >= 100} lies outside the bracket for flat children.
        let err = gamma_expectation_direct(&drv("0"), &drv("neg(z - 100)"), &[0.0; 4], &t, &s).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }), "{err}");
    }

    #[test]
    fn direct_examples() {
        let s = SolverSettings::default();
        let t = tree(1, 1.0);
        let sol = gamma_expectation_direct(&drv("0"), &drv("neg(z)"), &leaves(&t, "-w"), &t, &s).unwrap();
        assert_eq!(sol.root(), 1.0);
        let t = tree(6, 1.0);
        let xi = leaves(&t, "exp(-w*w)*(1 + w)");
        let sol = gamma_expectation_direct(&drv("0"), &drv("abs(z)"), &xi, &t, &s).unwrap();
        let max = xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(sol.root(), max);
        let r = bsde::supersolution_residual(&sol.as_bsde_solution(), &drv("0"), &t).unwrap();
        assert!(r.max_abs <= 1e-12 && r.increasing, "{r:?}");
    }

    #[test]
    fn zero_sets() {
        assert_eq!(zero_interval(&drv("abs(z)"), 0.0), Some((0.0, 0.0)));
        let (lo, hi) = zero_interval(&drv("neg(z)"), 0.0).unwrap();
        assert_eq!((lo, hi), (0.0, f64::INFINITY));
        let (lo, hi) = zero_interval(&drv("pos(z-0.5)"), 0.0).unwrap();
        assert_eq!(lo, f64::NEG_INFINITY);
        assert!((hi - 0.5).abs() < 1e-12);
        assert_eq!(zero_interval(&drv("1"), 0.0), None);
        let (lo, hi) = zero_interval(&drv("pos(abs(z) - t)"), 2.0).unwrap();
        assert!((lo + 2.0).abs() < 1e-12 && (hi - 2.0).abs() < 1e-12);
    }

    #[test]
    fn classical_suite_passes() {
        let t = tree(4, 1.0);
        let opts = SuiteOptions {
            trials: 20,
            seed: 7,
            tolerance_direct: 1e-10,
            tolerance_penalized: 1e-10,
            ..SuiteOptions::default()
        };
        let report = property_suite(&drv("0"), &drv("0"), &t, &SolverSettings::default(), &opts).unwrap();
        assert!(report.all_passed(), "{report:?}");
        assert!(report.rows.iter().all(|r| r.skipped.is_none()));
    }

    #[test]
    fn suite_skips_inapplicable_identities() {
        let t = tree(3, 1.0);
        let opts = SuiteOptions {
            trials: 5,
            ..SuiteOptions::default()
        };
        let report = property_suite(&drv("0.5*y"), &drv("abs(z)"), &t, &SolverSettings::default(), &opts).unwrap();
        let sp: Vec<_> = report.rows.iter().filter(|r| r.property == Property::SelfPreserving).collect();
        assert!(sp.iter().all(|r| r.skipped.is_some()));
        assert!(report.all_passed(), "{report:?}");
    }
}
