//! Discrete Brownian filtrations.
//!
//! A [`PathTree`] in path-tree mode is the full binary tree of `N` coin flips: each
//! node is an atom of `F_{t_i}` and the Brownian value is the sum of `±sqrt(dt)`
//! increments along the path. The recombining mode merges nodes with equal `w` and is
//! only suitable for Markov data; anything that needs the full filtration (events,
//! stopping rule enumeration) rejects it.
//!
//! Nodes are numbered in level order, up-child before down-child, so the numbering
//! is stable across runs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut, Range};

use crate::expr::{FunctionSpec, Signature};
use crate::{Error, Result};

pub type NodeId = usize;

pub const MAX_PATH_TREE_STEPS: usize = 24;
pub const MAX_RECOMBINING_STEPS: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TreeMode {
    PathTree,
    Recombining,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeConfig {
    pub steps: usize,
    pub horizon: f64,
    pub mode: TreeMode,
}

impl TreeConfig {
    pub fn path_tree(steps: usize, horizon: f64) -> Self {
        TreeConfig {
            steps,
            horizon,
            mode: TreeMode::PathTree,
        }
    }

    pub fn recombining(steps: usize, horizon: f64) -> Self {
        TreeConfig {
            steps,
            horizon,
            mode: TreeMode::Recombining,
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("tree.steps must be at least 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "tree.horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        let cap = match self.mode {
            TreeMode::PathTree => MAX_PATH_TREE_STEPS,
            TreeMode::Recombining => MAX_RECOMBINING_STEPS,
        };
        if self.steps > cap {
            return Err(Error::Config(format!(
                "tree.steps = {} exceeds the limit of {cap} for {:?} mode",
                self.steps, self.mode
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Up,
    Down,
}

impl Branch {
    pub fn sign(self) -> f64 {
        match self {
            Branch::Up => 1.0,
            Branch::Down => -1.0,
        }
    }
}

/// Binary Brownian tree. Immutable after [`PathTree::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct PathTree {
    config: TreeConfig,
    sqrt_dt: f64,
    level_start: Vec<usize>,
}

impl PathTree {
    pub fn build(config: TreeConfig) -> Result<Self> {
        config.validate()?;
        let n = config.steps;
        let mut level_start = Vec::with_capacity(n + 2);
        let mut acc = 0usize;
        for i in 0..=n {
            level_start.push(acc);
            acc += match config.mode {
                TreeMode::PathTree => 1usize << i,
                TreeMode::Recombining => i + 1,
            };
        }
        level_start.push(acc);
        Ok(PathTree {
            config,
            sqrt_dt: libm::sqrt(config.dt()),
            level_start,
        })
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn horizon(&self) -> f64 {
        self.config.horizon
    }

    pub fn dt(&self) -> f64 {
        self.config.dt()
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn mode(&self) -> TreeMode {
        self.config.mode
    }

    pub fn is_path_tree(&self) -> bool {
        self.config.mode == TreeMode::PathTree
    }

    /// Fails unless the tree carries the full filtration.
    pub fn require_path_tree(&self, what: &str) -> Result<()> {
        if self.is_path_tree() {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} requires a path tree, not a recombining tree")))
        }
    }

    pub fn len(&self) -> usize {
        self.level_start[self.config.steps + 1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn level_nodes(&self, level: usize) -> Range<NodeId> {
        self.level_start[level]..self.level_start[level + 1]
    }

    pub fn leaves(&self) -> Range<NodeId> {
        self.level_nodes(self.config.steps)
    }

    pub fn level(&self, node: NodeId) -> usize {
        match self.config.mode {
            TreeMode::PathTree => (usize::BITS - 1 - (node + 1).leading_zeros()) as usize,
            TreeMode::Recombining => self.level_start.partition_point(|&s| s <= node) - 1,
        }
    }

    pub fn level_time(&self, level: usize) -> f64 {
        level as f64 * self.dt()
    }

    pub fn time(&self, node: NodeId) -> f64 {
        self.level_time(self.level(node))
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        node >= self.level_start[self.config.steps]
    }

    /// Number of up moves minus number of down moves on the path to `node`.
    pub fn displacement(&self, node: NodeId) -> i64 {
        let level = self.level(node);
        let j = node - self.level_start[level];
        let downs = match self.config.mode {
            TreeMode::PathTree => j.count_ones() as i64,
            TreeMode::Recombining => j as i64,
        };
        level as i64 - 2 * downs
    }

    /// Brownian value `w` at `node`.
    pub fn w(&self, node: NodeId) -> f64 {
        self.displacement(node) as f64 * self.sqrt_dt
    }

    /// `(up, down)` children, or `None` at a leaf.
    pub fn children(&self, node: NodeId) -> Option<(NodeId, NodeId)> {
        if self.is_leaf(node) {
            return None;
        }
        Some(match self.config.mode {
            TreeMode::PathTree => (2 * node + 1, 2 * node + 2),
            TreeMode::Recombining => {
                let level = self.level(node);
                let up = self.level_start[level + 1] + (node - self.level_start[level]);
                (up, up + 1)
            }
        })
    }

    /// Parent in a path tree; one of the two parents in a recombining tree.
    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        if node == 0 {
            return None;
        }
        Some(match self.config.mode {
            TreeMode::PathTree => (node - 1) / 2,
            TreeMode::Recombining => {
                let level = self.level(node);
                let j = node - self.level_start[level];
                self.level_start[level - 1] + j.min(level - 1)
            }
        })
    }

    /// Ancestor of `node` at `level` (unique in a path tree).
    pub fn ancestor_at(&self, mut node: NodeId, level: usize) -> NodeId {
        debug_assert!(level <= self.level(node));
        match self.config.mode {
            TreeMode::PathTree => {
                let shift = self.level(node) - level;
                ((node + 1) >> shift) - 1
            }
            TreeMode::Recombining => {
                while self.level(node) > level {
                    node = self.parent(node).expect("non-root");
                }
                node
            }
        }
    }

    /// Brownian increment on the edge into `branch`.
    pub fn increment(&self, branch: Branch) -> f64 {
        branch.sign() * self.sqrt_dt
    }

    /// One-step transition probabilities `(up, down)`.
    pub fn transition_probabilities(&self) -> (f64, f64) {
        (0.5, 0.5)
    }
}

/// One real value per tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    values: Vec<f64>,
}

impl AdaptedProcess {
    pub fn constant(tree: &PathTree, value: f64) -> Self {
        AdaptedProcess {
            values: vec![value; tree.len()],
        }
    }

    pub fn from_fn(tree: &PathTree, f: impl FnMut(NodeId) -> f64) -> Self {
        AdaptedProcess {
            values: (0..tree.len()).map(f).collect(),
        }
    }

    pub fn from_values(tree: &PathTree, values: Vec<f64>) -> Result<Self> {
        if values.len() != tree.len() {
            return Err(Error::Shape {
                expected: tree.len(),
                actual: values.len(),
            });
        }
        Ok(AdaptedProcess { values })
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        AdaptedProcess { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_shape(&self, tree: &PathTree) -> Result<()> {
        if self.values.len() == tree.len() {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: tree.len(),
                actual: self.values.len(),
            })
        }
    }

    pub fn leaf_values<'a>(&'a self, tree: &PathTree) -> &'a [f64] {
        &self.values[tree.leaves()]
    }

    pub fn max_abs_diff(&self, other: &AdaptedProcess) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

impl Index<NodeId> for AdaptedProcess {
    type Output = f64;
    fn index(&self, node: NodeId) -> &f64 {
        &self.values[node]
    }
}

impl IndexMut<NodeId> for AdaptedProcess {
    fn index_mut(&mut self, node: NodeId) -> &mut f64 {
        &mut self.values[node]
    }
}

/// Classical `E[p_{t+1} | F_t]` at a non-leaf node.
pub fn conditional_expectation(tree: &PathTree, p: &AdaptedProcess, node: NodeId) -> Result<f64> {
    p.check_shape(tree)?;
    let (up, down) = tree
        .children(node)
        .ok_or_else(|| Error::Domain(format!("node {node} is a leaf; it has no conditional expectation")))?;
    Ok(0.5 * (p[up] + p[down]))
}

/// Sanity flags raised while realizing a reward.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardFlags {
    pub negative: bool,
    pub exceeds_bound: bool,
    pub min: f64,
    pub max: f64,
}

/// Evaluates `f(t_i, w(node))` at every node.
pub fn realize_reward(f: &FunctionSpec, tree: &PathTree, bound: Option<f64>) -> Result<(AdaptedProcess, RewardFlags)> {
    if f.signature() != Signature::Reward {
        return Err(Error::Signature {
            expected: Signature::Reward,
            found: f.signature(),
        });
    }
    let mut values = Vec::with_capacity(tree.len());
    for node in 0..tree.len() {
        let v = f
            .eval_reward(tree.time(node), tree.w(node))
            .map_err(|source| Error::Eval { node, source })?;
        values.push(v);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let flags = RewardFlags {
        negative: min < 0.0,
        exceeds_bound: bound.is_some_and(|b| values.iter().any(|v| libm::fabs(*v) > b)),
        min,
        max,
    };
    Ok((AdaptedProcess::from_raw(values), flags))
}

/// Terminal condition `xi = f(T, w)` at the leaves.
pub fn realize_terminal(f: &FunctionSpec, tree: &PathTree) -> Result<Vec<f64>> {
    if f.signature() != Signature::Reward {
        return Err(Error::Signature {
            expected: Signature::Reward,
            found: f.signature(),
        });
    }
    let t = tree.horizon();
    tree.leaves()
        .map(|node| {
            f.eval_reward(t, tree.w(node))
                .map_err(|source| Error::Eval { node, source })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn one_step_tree() {
        let tree = PathTree::build(TreeConfig::path_tree(1, 1.0)).unwrap();
        assert_eq!(tree.len(), 3);
        let leaves: Vec<f64> = tree.leaves().map(|n| tree.w(n)).collect();
        assert_eq!(leaves, vec![1.0, -1.0]);
        assert_eq!(tree.children(0), Some((1, 2)));
        assert_eq!(tree.parent(2), Some(0));
    }

    #[test]
    fn two_step_tree() {
        let tree = PathTree::build(TreeConfig::path_tree(2, 1.0)).unwrap();
        assert_eq!(tree.len(), 7);
        let leaves: Vec<f64> = tree.leaves().map(|n| tree.w(n)).collect();
        let r2 = libm::sqrt(2.0);
        assert!(close(leaves[0], r2) && leaves[1] == 0.0 && leaves[2] == 0.0 && close(leaves[3], -r2));
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(PathTree::build(TreeConfig::path_tree(0, 1.0)), Err(Error::Config(_))));
        assert!(matches!(PathTree::build(TreeConfig::path_tree(2, 0.0)), Err(Error::Config(_))));
        assert!(matches!(PathTree::build(TreeConfig::path_tree(25, 1.0)), Err(Error::Config(_))));
        assert!(PathTree::build(TreeConfig::recombining(64, 1.0)).is_ok());
    }

    #[test]
    fn wiring_is_consistent() {
        for config in [TreeConfig::path_tree(6, 2.0), TreeConfig::recombining(9, 0.5)] {
            let tree = PathTree::build(config).unwrap();
            for level in 0..=tree.steps() {
                let nodes = tree.level_nodes(level);
                if tree.is_path_tree() {
                    assert_eq!(nodes.len(), 1 << level);
                }
                for node in nodes {
                    assert_eq!(tree.level(node), level);
                    if let Some((u, d)) = tree.children(node) {
                        assert!(close(tree.w(u) - tree.w(node), tree.increment(Branch::Up)));
                        assert!(close(tree.w(d) - tree.w(node), tree.increment(Branch::Down)));
                        assert_eq!(tree.level(u), level + 1);
                        if tree.is_path_tree() {
                            assert_eq!(tree.parent(u), Some(node));
                            assert_eq!(tree.parent(d), Some(node));
                        }
                    }
                    assert_eq!(tree.ancestor_at(node, 0), 0);
                }
            }
            let (pu, pd) = tree.transition_probabilities();
            assert_eq!(pu + pd, 1.0);
        }
    }

    #[test]
    fn conditional_expectation_examples() {
        let tree = PathTree::build(TreeConfig::path_tree(1, 1.0)).unwrap();
        let p = AdaptedProcess::from_values(&tree, vec![0.0, 1.0, -1.0]).unwrap();
        assert_eq!(conditional_expectation(&tree, &p, 0).unwrap(), 0.0);
        let p = AdaptedProcess::from_values(&tree, vec![0.0, 2.0, 0.0]).unwrap();
        assert_eq!(conditional_expectation(&tree, &p, 0).unwrap(), 1.0);
        assert!(matches!(conditional_expectation(&tree, &p, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn brownian_moments() {
        for (n, t) in [(1, 1.0), (5, 2.0), (12, 0.3)] {
            let tree = PathTree::build(TreeConfig::path_tree(n, t)).unwrap();
            let leaves = tree.leaves();
            let count = leaves.len() as f64;
            let mean: f64 = leaves.clone().map(|l| tree.w(l)).sum::<f64>() / count;
            let second: f64 = leaves.map(|l| tree.w(l).powi(2)).sum::<f64>() / count;
            assert!(mean.abs() < 1e-12);
            assert!(close(second, t));
        }
    }

    #[test]
    fn reward_realization() {
        let tree = PathTree::build(TreeConfig::path_tree(2, 2.0)).unwrap();
        let f = FunctionSpec::reward("abs(w)").unwrap();
        let (x, flags) = realize_reward(&f, &tree, None).unwrap();
        let expected = [0.0, 1.0, 1.0, 2.0, 0.0, 0.0, 2.0];
        for (a, b) in x.values().iter().zip(expected) {
            assert!(close(*a, b));
        }
        assert!(!flags.negative);

        let (one, flags) = realize_reward(&FunctionSpec::reward("1.0").unwrap(), &tree, Some(1.0)).unwrap();
        assert!(one.values().iter().all(|v| *v == 1.0));
        assert!(!flags.negative && !flags.exceeds_bound);

        let (_, flags) = realize_reward(&FunctionSpec::reward("w").unwrap(), &tree, Some(1.5)).unwrap();
        assert!(flags.negative && flags.exceeds_bound);

        let g = FunctionSpec::driver("y + z").unwrap();
        assert!(matches!(realize_reward(&g, &tree, None), Err(Error::Signature { .. })));
    }
}
