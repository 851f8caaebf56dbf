//! Conjugate gradients and quasi-Newton methods on strictly convex quadratic
//! programs, with numerical checks of when the two produce parallel search
//! directions.
//!
//! Modules, bottom-up:
//!
//! - [`linalg`]: dense vectors, matrices, pivoted solves, PD tests.
//! - [`problem`]: the quadratic program, generators, JSON persistence.
//! - [`cg`]: conjugate gradients with exact line search.
//! - [`qn`]: quasi-Newton driver and update schemes.
//! - [`lab`]: `A_k`/`W_k` decompositions, δ predictions, degenerate values,
//!   positive-definiteness thresholds and per-iteration reports.
//! - [`verify`]: randomized property batteries over all of the above.

pub mod cg;
pub mod error;
pub mod lab;
pub mod linalg;
pub mod problem;
pub mod qn;
pub mod verify;

pub use cg::{cg_run, IterationState, Trace};
pub use error::{Error, Result};
pub use lab::{build_report, ParallelismReport};

pub use linalg::{Matrix, Vector};
pub use problem::{QuadraticProblem, SpectrumSpec};
pub use qn::{qn_run, QnRun, UpdateScheme};
