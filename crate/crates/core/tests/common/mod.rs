//! Independent reference implementations used by the integration tests.
//!
//! Every catalog generator has the form `a y + beta(z)` with `beta` piecewise linear
//! and every catalog constraint cuts out an interval of `z`, so the one-step minimal
//! supersolution has a closed form: minimize the convex piecewise-linear
//! `h(z) = max(u - z s, d + z s) + beta(z) dt` over the interval, checking kinks and
//! endpoints only, then divide by `1 - a dt`.

#![allow(dead_code)]

use gstop_core::expr::catalog::{self, Entry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub enum Beta {
    Zero,
    Abs(f64),
    Linear(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct Model {
    pub a: f64,
    pub beta: Beta,
    pub lo: f64,
    pub hi: f64,
}

impl Model {
    pub fn of(g: &Entry, phi: &Entry) -> Model {
        let (a, beta) = match g.name {
            "zero" => (0.0, Beta::Zero),
            "b_abs_z" => (0.0, Beta::Abs(catalog::B)),
            "a_y" => (catalog::A, Beta::Zero),
            "a_y_b_z" => (catalog::A, Beta::Linear(catalog::B)),
            other => panic!("no model for generator {other}"),
        };
        let (lo, hi) = match phi.name {
            "zero" => (f64::NEG_INFINITY, f64::INFINITY),
            "z_zero" => (0.0, 0.0),
            "z_nonneg" => (0.0, f64::INFINITY),
            "z_upper" => (f64::NEG_INFINITY, catalog::K),
            other => panic!("no model for constraint {other}"),
        };
        Model { a, beta, lo, hi }
    }

    /// Exact one-step minimal supersolution from children `(u, d)`.
    pub fn step(&self, u: f64, d: f64, dt: f64) -> f64 {
        let s = dt.sqrt();
        let h = |z: f64| {
            let b = match self.beta {
                Beta::Zero => 0.0,
                Beta::Abs(b) => b * z.abs(),
                Beta::Linear(b) => b * z,
            };
            (u - z * s).max(d + z * s) + b * dt
        };
        let kink = (u - d) / (2.0 * s);
        let mut best = f64::INFINITY;
        for z in [kink, 0.0, self.lo, self.hi] {
            if z.is_finite() && z >= self.lo && z <= self.hi {
                best = best.min(h(z));
            }
        }
        best / (1.0 - self.a * dt)
    }
}

/// Nodes of a path tree with `steps` steps, level-order, children `2k+1, 2k+2`.
pub fn node_count(steps: usize) -> usize {
    (1 << (steps + 1)) - 1
}

/// Backward recursion `y = step(y_up, y_down)` over a path tree.
pub fn backward(leaves: &[f64], dt: f64, mut step: impl FnMut(f64, f64) -> f64) -> Vec<f64> {
    let steps = leaves.len().trailing_zeros() as usize;
    let n = node_count(steps);
    let mut y = vec![0.0; n];
    y[n - leaves.len()..].copy_from_slice(leaves);
    for k in (0..n - leaves.len()).rev() {
        y[k] = step(y[2 * k + 1], y[2 * k + 2]);
    }
    let _ = dt;
    y
}

pub fn expectation(model: &Model, leaves: &[f64], dt: f64) -> Vec<f64> {
    backward(leaves, dt, |u, d| model.step(u, d, dt))
}

/// `V = max(X, step(V_up, V_down))`, `V = X` at leaves.
pub fn snell(model: &Model, x: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    let mut v = x.to_vec();
    let first_leaf = n / 2;
    for k in (0..first_leaf).rev() {
        v[k] = x[k].max(model.step(v[2 * k + 1], v[2 * k + 2], dt));
    }
    v
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// Pairs whose penalized operator at the monotone cap equals the exact one-step
/// minimum (all but the linear-in-`z` generator under the zero constraint).
pub fn penalized_is_exact_at_cap(g: &Entry, phi: &Entry) -> bool {
    !(g.name == "a_y_b_z" && phi.name == "z_zero")
}
