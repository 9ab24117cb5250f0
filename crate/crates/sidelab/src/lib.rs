//! Numerical laboratory for Levy-driven stochastic integro-differential
//! equations on a box domain.
//!
//! The crate simulates two equation classes driven by a finite set of Wiener
//! modes and compensated Poisson jump streams with atomic mark spaces, and
//! provides the instruments used to study them:
//!
//! * [`regfun`]: the regularization triple (alpha, beta, gamma) that smooths
//!   the positive-part map and its derivatives,
//! * [`field`]: grids, discrete H1 fields, norms, mollification, cutoffs,
//! * [`noise`]: reproducible Wiener/jump realizations with replay,
//! * [`coeffs`]: coefficient sets and named presets,
//! * [`ops`]: local and nonlocal operators, weak forms, functionals,
//! * [`validate`]: sampling-based structural assumption checks,
//! * [`solver`]: semi-implicit time stepping with exact-time jumps,
//! * [`ledger`]: pathwise Ito accounting for the positive-part identity,
//! * [`harness`]: coupled comparison experiments and the flip counterexample.
//!
//! Monte Carlo loops run through [`exec`], which is data-parallel when the
//! `parallel` feature (default) is enabled and sequential otherwise; results
//! are bitwise independent of the worker count either way.

pub mod coeffs;
pub mod error;
pub mod exec;
pub mod field;
pub mod harness;
pub mod ledger;
pub mod noise;
pub mod ops;
pub mod regfun;
pub mod solver;
pub mod validate;

pub use error::{Error, Result};
pub use field::{Field, Grid};
pub use noise::{MarkSpace, NoiseRealization, TimeGrid};
