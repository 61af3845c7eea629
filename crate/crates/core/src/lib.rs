#![no_std]

//! Numerical laboratory for constrained g-expectations and optimal stopping.
//!
//! The probability space is an exact binary Brownian tree ([`lattice`]). On it we
//! solve backward equations driven by a generator `g(t, y, z)` ([`bsde`]), compute
//! the minimal supersolution subject to a constraint `phi(t, y, z) = 0` either by
//! penalization or by a direct one-step minimization ([`penalize`]), and study the
//! optimal stopping problem `sup_tau E_0(X_tau)` under that nonlinear expectation
//! ([`stopping`]). Generators, constraints and rewards are small expressions
//! ([`expr`]).
//!
//! The crate is `no_std` and only needs `alloc`; file formats and the command line
//! live in the companion `gstop` crate.

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bsde;
mod error;
pub mod expr;
pub mod lattice;
pub mod penalize;
pub mod stopping;

pub use error::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;
