//! Backward equations `-dy = g(t, y, z) dt + dC - z dW` on a [`PathTree`].
//!
//! One step from children `(y_up, y_down)` uses the martingale-representation
//! quotient `z = (y_up - y_down) / (2 sqrt(dt))` and solves the implicit relation
//! `y = (y_up + y_down) / 2 + g(t, y, z) dt` by Picard iteration. The implicit form
//! keeps the scheme monotone in the children as long as `|g_z| sqrt(dt) <= 1`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::expr::{FunctionSpec, Signature, Var};
use crate::lattice::{AdaptedProcess, NodeId, PathTree};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub picard_tolerance: f64,
    pub picard_max_iterations: u32,
    /// Upper bound on `dt * M_y` checked before solving.
    pub contraction_limit: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            picard_tolerance: 1e-12,
            picard_max_iterations: 100,
            contraction_limit: 0.5,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.picard_tolerance > 0.0) {
            return Err(Error::Config(format!(
                "solver.picard_tolerance must be positive, got {}",
                self.picard_tolerance
            )));
        }
        if self.picard_max_iterations == 0 {
            return Err(Error::Config("solver.picard_max_iterations must be at least 1".into()));
        }
        if !(self.contraction_limit > 0.0 && self.contraction_limit < 1.0) {
            return Err(Error::Config(format!(
                "solver.contraction_limit must lie in (0, 1), got {}",
                self.contraction_limit
            )));
        }
        Ok(())
    }
}

/// Result of one backward step at a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub y: f64,
    pub z: f64,
    /// Increment of `C` on the up and down edges out of the node.
    pub dc_up: f64,
    pub dc_down: f64,
    pub iterations: u32,
}

/// A one-step backward operator bound to a tree's time step.
pub trait OneStep {
    fn step(&self, node: NodeId, level: usize, y_up: f64, y_down: f64) -> Result<Step>;
}

impl<T: OneStep + ?Sized> OneStep for &T {
    fn step(&self, node: NodeId, level: usize, y_up: f64, y_down: f64) -> Result<Step> {
        (**self).step(node, level, y_up, y_down)
    }
}

/// Solves `y = base + g(t, y, z) dt` for fixed `z`.
///
/// Fixed-point iteration with Aitken extrapolation every second step (Steffensen),
/// which is exact after one extrapolation when `g` is affine in `y`. An extrapolated
/// point is kept only if its residual beats the plain iterate's.
pub(crate) fn picard(
    g: &FunctionSpec,
    g_uses_y: bool,
    node: NodeId,
    t: f64,
    base: f64,
    z: f64,
    dt: f64,
    settings: &SolverSettings,
) -> Result<(f64, u32)> {
    let eval = |y: f64| g.eval_driver(t, y, z).map_err(|source| Error::Eval { node, source });
    if !g_uses_y {
        return Ok((base + eval(0.0)? * dt, 1));
    }
    let map = |y: f64| -> Result<f64> { Ok(base + eval(y)? * dt) };
    let tol = |y: f64| settings.picard_tolerance * libm::fabs(y).max(1.0);
    let max = settings.picard_max_iterations;
    let mut evals = 0u32;
    let mut y = base;
    let mut last_step = f64::INFINITY;
    while evals < max {
        let y1 = map(y)?;
        evals += 1;
        last_step = libm::fabs(y1 - y);
        if last_step <= tol(y1) {
            return Ok((y1, evals));
        }
        if evals == max {
            break;
        }
        let y2 = map(y1)?;
        evals += 1;
        let step2 = libm::fabs(y2 - y1);
        last_step = step2;
        if step2 <= tol(y2) {
            return Ok((y2, evals));
        }
        let denom = y2 - 2.0 * y1 + y;
        let acc = y - (y1 - y) * (y1 - y) / denom;
        y = y2;
        if denom != 0.0 && acc.is_finite() && evals < max {
            let t_acc = map(acc)?;
            evals += 1;
            let r = libm::fabs(t_acc - acc);
            if r <= tol(t_acc) {
                return Ok((t_acc, evals));
            }
            if r < step2 {
                y = t_acc;
                last_step = r;
            }
        }
    }
    Err(Error::Picard {
        node,
        iterations: max,
        last_step,
    })
}

/// The unconstrained one-step scheme for a generator `g`.
#[derive(Debug, Clone)]
pub struct BsdeOperator {
    g: FunctionSpec,
    g_uses_y: bool,
    dt: f64,
    sqrt_dt: f64,
    settings: SolverSettings,
}

impl BsdeOperator {
    /// Binds `g` to the tree's step, enforcing the contraction guard `dt * M_y <= limit`.
    pub fn new(g: FunctionSpec, tree: &PathTree, settings: SolverSettings) -> Result<Self> {
        settings.validate()?;
        if g.signature() != Signature::Driver {
            return Err(Error::Signature {
                expected: Signature::Driver,
                found: g.signature(),
            });
        }
        let g_uses_y = g.references(Var::Y);
        if g_uses_y {
            let m_y = g.lipschitz_on(tree.horizon())?.y;
            if tree.dt() * m_y > settings.contraction_limit {
                return Err(Error::Stability(format!(
                    "contraction guard violated for generator `{}`: dt * M_y = {} * {} > {}",
                    g.source(),
                    tree.dt(),
                    m_y,
                    settings.contraction_limit
                )));
            }
        }
        Ok(BsdeOperator {
            g,
            g_uses_y,
            dt: tree.dt(),
            sqrt_dt: tree.sqrt_dt(),
            settings,
        })
    }

    pub fn generator(&self) -> &FunctionSpec {
        &self.g
    }
}

impl OneStep for BsdeOperator {
    #[inline]
    fn step(&self, node: NodeId, level: usize, y_up: f64, y_down: f64) -> Result<Step> {
        let z = (y_up - y_down) / (2.0 * self.sqrt_dt);
        let base = 0.5 * (y_up + y_down);
        let t = level as f64 * self.dt;
        let (y, iterations) = picard(&self.g, self.g_uses_y, node, t, base, z, self.dt, &self.settings)?;
        Ok(Step {
            y,
            z,
            dc_up: 0.0,
            dc_down: 0.0,
            iterations,
        })
    }
}

/// Adapted triple `(y, z, dC)` produced by a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    pub y: AdaptedProcess,
    /// `z` at non-leaf nodes; zero at leaves and frozen nodes.
    pub z: AdaptedProcess,
    /// `[up, down]` increments of `C` on the edges out of each node.
    pub dc: Vec<[f64; 2]>,
    pub iterations: Vec<u32>,
}

impl BsdeSolution {
    pub fn root(&self) -> f64 {
        self.y[0]
    }
}

/// Where a backward pass starts and which nodes keep their initial value.
#[derive(Debug, Clone, Copy)]
pub struct Pass<'a> {
    /// Values at `start_level` and at frozen nodes; indexed by node.
    pub init: &'a [f64],
    pub start_level: usize,
    pub frozen: Option<&'a [bool]>,
    /// Nodes that are never visited (e.g. strictly below a stopped node).
    pub skip: Option<&'a [bool]>,
}

impl<'a> Pass<'a> {
    pub fn from_leaves(tree: &PathTree, init: &'a [f64]) -> Self {
        Pass {
            init,
            start_level: tree.steps(),
            frozen: None,
            skip: None,
        }
    }
}

/// Backward induction; `visit` sees every computed step. Unvisited nodes hold NaN.
pub(crate) fn backward_with<O: OneStep>(
    op: &O,
    tree: &PathTree,
    pass: Pass<'_>,
    mut visit: impl FnMut(NodeId, &Step),
) -> Result<Vec<f64>> {
    if pass.init.len() != tree.len() {
        return Err(Error::Shape {
            expected: tree.len(),
            actual: pass.init.len(),
        });
    }
    if pass.start_level > tree.steps() {
        return Err(Error::Domain(format!(
            "start level {} is beyond the tree's {} steps",
            pass.start_level,
            tree.steps()
        )));
    }
    let mut y = vec![f64::NAN; tree.len()];
    let skipped = |n: NodeId| pass.skip.is_some_and(|s| s[n]);
    for node in tree.level_nodes(pass.start_level) {
        if !skipped(node) {
            y[node] = pass.init[node];
        }
    }
    for level in (0..pass.start_level).rev() {
        for node in tree.level_nodes(level) {
            if skipped(node) {
                continue;
            }
            if pass.frozen.is_some_and(|f| f[node]) {
                y[node] = pass.init[node];
                continue;
            }
            let (up, down) = tree.children(node).expect("non-leaf");
            let step = op.step(node, level, y[up], y[down])?;
            visit(node, &step);
            y[node] = step.y;
        }
    }
    Ok(y)
}

pub(crate) fn backward_values<O: OneStep>(op: &O, tree: &PathTree, pass: Pass<'_>) -> Result<Vec<f64>> {
    backward_with(op, tree, pass, |_, _| {})
}

/// Backward pass recording the full triple.
pub fn backward_full<O: OneStep>(op: &O, tree: &PathTree, pass: Pass<'_>) -> Result<BsdeSolution> {
    let mut z = vec![0.0; tree.len()];
    let mut dc = vec![[0.0; 2]; tree.len()];
    let mut iterations = vec![0; tree.len()];
    let y = backward_with(op, tree, pass, |node, step| {
        z[node] = step.z;
        dc[node] = [step.dc_up, step.dc_down];
        iterations[node] = step.iterations;
    })?;
    Ok(BsdeSolution {
        y: AdaptedProcess::from_raw(y),
        z: AdaptedProcess::from_raw(z),
        dc,
        iterations,
    })
}

/// Places leaf values into a node-indexed vector.
pub(crate) fn leaf_vector(tree: &PathTree, terminal: &[f64]) -> Result<Vec<f64>> {
    let leaves = tree.leaves();
    if terminal.len() != leaves.len() {
        return Err(Error::Shape {
            expected: leaves.len(),
            actual: terminal.len(),
        });
    }
    if let Some(i) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("terminal value at leaf {i} is not finite")));
    }
    let mut init = vec![f64::NAN; tree.len()];
    init[leaves].copy_from_slice(terminal);
    Ok(init)
}

/// Solves the unconstrained equation with terminal leaf values `terminal`.
pub fn solve_bsde(g: &FunctionSpec, terminal: &[f64], tree: &PathTree, settings: &SolverSettings) -> Result<BsdeSolution> {
    let op = BsdeOperator::new(g.clone(), tree, *settings)?;
    let init = leaf_vector(tree, terminal)?;
    backward_full(&op, tree, Pass::from_leaves(tree, &init))
}

/// Nodes not reachable from the root without passing through a stopped node.
pub(crate) fn below_stopped(tree: &PathTree, stop: &[bool]) -> Vec<bool> {
    let mut reached = vec![false; tree.len()];
    reached[0] = true;
    for level in 0..tree.steps() {
        for node in tree.level_nodes(level) {
            if reached[node] && !stop[node] {
                let (u, d) = tree.children(node).expect("non-leaf");
                reached[u] = true;
                reached[d] = true;
            }
        }
    }
    reached.into_iter().map(|r| !r).collect()
}

/// Value at the root of the equation whose terminal condition is `X` frozen at the
/// nodes where `stop` is set. Every leaf must be stopped or lie below a stopped node.
pub fn evaluate_stopped<O: OneStep>(op: &O, tree: &PathTree, x: &AdaptedProcess, stop: &[bool]) -> Result<f64> {
    x.check_shape(tree)?;
    if stop.len() != tree.len() {
        return Err(Error::Shape {
            expected: tree.len(),
            actual: stop.len(),
        });
    }
    let skip = below_stopped(tree, stop);
    if let Some(leaf) = tree.leaves().find(|&l| !stop[l] && !skip[l]) {
        return Err(Error::Domain(format!("leaf {leaf} is never stopped")));
    }
    let y = backward_values(
        op,
        tree,
        Pass {
            init: x.values(),
            start_level: tree.steps(),
            frozen: Some(stop),
            skip: Some(&skip),
        },
    )?;
    Ok(y[0])
}

/// `y_0` for the unconstrained equation with terminal `X` at the stopping rule.
pub fn solve_to_stopping(
    g: &FunctionSpec,
    x: &AdaptedProcess,
    rule: &crate::stopping::StoppingRule,
    tree: &PathTree,
    settings: &SolverSettings,
) -> Result<f64> {
    let op = BsdeOperator::new(g.clone(), tree, *settings)?;
    evaluate_stopped(&op, tree, x, rule.stops())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualReport {
    /// Largest `|r|` over all edges.
    pub max_abs: f64,
    /// Smallest increment of `C`.
    pub min_dc: f64,
    /// `min_dc >= -1e-12`.
    pub increasing: bool,
}

/// Per-edge residual of `y_t = y_{t+1} + g dt - z dW + dC` for a computed triple.
pub fn supersolution_residual(sol: &BsdeSolution, g: &FunctionSpec, tree: &PathTree) -> Result<ResidualReport> {
    sol.y.check_shape(tree)?;
    sol.z.check_shape(tree)?;
    if sol.dc.len() != tree.len() {
        return Err(Error::Shape {
            expected: tree.len(),
            actual: sol.dc.len(),
        });
    }
    let dt = tree.dt();
    let mut max_abs: f64 = 0.0;
    let mut min_dc = f64::INFINITY;
    for level in 0..tree.steps() {
        let t = tree.level_time(level);
        for node in tree.level_nodes(level) {
            let (y, z) = (sol.y[node], sol.z[node]);
            if !y.is_finite() {
                continue;
            }
            let gv = g.eval_driver(t, y, z).map_err(|source| Error::Eval { node, source })?;
            let (up, down) = tree.children(node).expect("non-leaf");
            for (k, (child, dw)) in [(up, tree.sqrt_dt()), (down, -tree.sqrt_dt())].into_iter().enumerate() {
                let dc = sol.dc[node][k];
                let r = y - sol.y[child] - gv * dt + z * dw - dc;
                max_abs = max_abs.max(libm::fabs(r));
                min_dc = min_dc.min(dc);
            }
        }
    }
    if min_dc == f64::INFINITY {
        min_dc = 0.0;
    }
    Ok(ResidualReport {
        max_abs,
        min_dc,
        increasing: min_dc >= -1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{realize_terminal, TreeConfig};

    fn tree(n: usize, t: f64) -> PathTree {
        PathTree::build(TreeConfig::path_tree(n, t)).unwrap()
    }

    fn terminal(tree: &PathTree, src: &str) -> Vec<f64> {
        realize_terminal(&FunctionSpec::reward(src).unwrap(), tree).unwrap()
    }

    fn g(src: &str) -> FunctionSpec {
        FunctionSpec::driver(src).unwrap()
    }

    #[test]
    fn one_step_examples() {
        let t = tree(1, 1.0);
        let s = SolverSettings::default();
        let sol = solve_bsde(&g("0"), &terminal(&t, "w*w"), &t, &s).unwrap();
        assert_eq!(sol.root(), 1.0);

        let sol = solve_bsde(&g("z"), &terminal(&t, "w"), &t, &s).unwrap();
        assert_eq!(sol.z[0], 1.0);
        assert_eq!(sol.root(), 1.0);

        let sol = solve_bsde(&g("abs(z)"), &terminal(&t, "-w"), &t, &s).unwrap();
        assert_eq!(sol.z[0], -1.0);
        assert_eq!(sol.root(), 1.0);
    }

    #[test]
    fn implicit_linear_generator() {
        // y = m + a y dt  =>  y = m / (1 - a dt)
        let t = tree(1, 1.0);
        let sol = solve_bsde(&g("0.5*y"), &[3.0, 1.0], &t, &SolverSettings::default()).unwrap();
        assert!((sol.root() - 4.0).abs() < 1e-11);
        assert!(sol.iterations[0] > 1);
    }

    #[test]
    fn fixed_point_for_nonlinear_generators() {
        let s = SolverSettings::default();
        for src in ["0.5*abs(y-1)", "0.4*exp(-y*y)", "max(0.3*y, -0.2*y) + z"] {
            let f = g(src);
            for base in [-3.0, 0.0, 0.7, 5.0] {
                let (y, it) = picard(&f, true, 0, 0.0, base, 0.5, 0.5, &s).unwrap();
                let residual = (y - base - f.eval_driver(0.0, y, 0.5).unwrap() * 0.5).abs();
                assert!(residual <= 1e-11, "{src} base {base}: residual {residual}");
                assert!(it <= 20, "{src} base {base}: {it} evaluations");
            }
        }
    }

    #[test]
    fn contraction_guard() {
        let t = tree(1, 1.0);
        let err = solve_bsde(&g("2*y"), &[1.0, 1.0], &t, &SolverSettings::default()).unwrap_err();
        assert!(matches!(err, Error::Stability(_)), "{err}");
    }

    #[test]
    fn picard_nonconvergence_names_node() {
        let t = tree(2, 1.0);
        let settings = SolverSettings {
            picard_max_iterations: 2,
            ..SolverSettings::default()
        };
        let err = solve_bsde(&g("0.4*y"), &[1.0, 2.0, 3.0, 4.0], &t, &settings).unwrap_err();
        assert!(matches!(err, Error::Picard { node: 1..=2, .. }), "{err}");
    }

    #[test]
    fn shape_and_domain_errors() {
        let t = tree(2, 1.0);
        let s = SolverSettings::default();
        assert!(matches!(solve_bsde(&g("0"), &[1.0], &t, &s), Err(Error::Shape { .. })));
        assert!(matches!(
            solve_bsde(&g("0"), &[1.0, f64::NAN, 0.0, 0.0], &t, &s),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            solve_bsde(&g("1/z"), &[1.0, 1.0, 1.0, 1.0], &t, &s),
            Err(Error::Eval { node: 1, .. })
        ));
    }

    #[test]
    fn residual_examples() {
        let t = tree(4, 1.0);
        let gen = g("0.5*abs(z) + 0.25*y");
        let mut sol = solve_bsde(&gen, &terminal(&t, "max(w, 0) + sqrt(1 + w*w)"), &t, &SolverSettings::default()).unwrap();
        let r = supersolution_residual(&sol, &gen, &t).unwrap();
        assert!(r.max_abs <= 1e-12, "{}", r.max_abs);
        assert!(r.increasing);

        sol.y[5] += 1e-3;
        let r = supersolution_residual(&sol, &gen, &t).unwrap();
        assert!(r.max_abs >= 1e-3 - 1e-12);

        sol.y[5] -= 1e-3;
        sol.dc[2][0] = -0.1;
        let r = supersolution_residual(&sol, &gen, &t).unwrap();
        assert!(!r.increasing);
        assert_eq!(r.min_dc, -0.1);
    }

    #[test]
    fn zero_generator_is_iterated_conditional_expectation() {
        let t = tree(6, 1.5);
        let xi = terminal(&t, "exp(w) - w*w*w");
        let sol = solve_bsde(&g("0"), &xi, &t, &SolverSettings::default()).unwrap();
        let mean = xi.iter().sum::<f64>() / xi.len() as f64;
        assert!((sol.root() - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        for node in 0..t.leaves().start {
            let (u, d) = t.children(node).unwrap();
            assert!((sol.y[node] - 0.5 * (sol.y[u] + sol.y[d])).abs() <= 1e-15 * (1.0 + sol.y[node].abs()));
        }
    }

    #[test]
    fn recombining_matches_path_tree_for_markov_terminal() {
        let p = tree(8, 1.0);
        let r = PathTree::build(TreeConfig::recombining(8, 1.0)).unwrap();
        let gen = g("0.5*abs(z) + 0.5*y");
        let s = SolverSettings::default();
        let a = solve_bsde(&gen, &terminal(&p, "w*w"), &p, &s).unwrap().root();
        let b = solve_bsde(&gen, &terminal(&r, "w*w"), &r, &s).unwrap().root();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
