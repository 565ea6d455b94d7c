//! Constrained-field solver toolkit.
//!
//! A field `f: R^M -> R^N` is represented as a weighted sum of learnable basis
//! functions. Linear differential-operator equality constraints are enforced
//! exactly (to solver precision) by assembling and solving a collocation
//! linear system every iteration, while the remaining basis parameters are
//! trained by gradient descent *through* the solve via the adjoint method.
//!
//! Module map:
//! - [`linalg`]: dense LU with partial pivoting, forward/adjoint solves, and a
//!   differentiable Frobenius condition surrogate.
//! - [`diff`]: derivative bundles (value/jacobian/hessian), a small analytic
//!   feed-forward encoder, and a recorded-operation tape for parameter
//!   gradients.
//! - [`basis`]: the basis-function families (kernel, hypernet, hybrid,
//!   skewed RBF, polynomial, ...).
//! - [`operators`]: a text DSL for linear differential operators and their
//!   application to derivative bundles.
//! - [`collocation`]: system assembly, weight solves, field evaluation, and
//!   gradients through the solve.
//! - [`sparse`]: patch-based solver for compactly supported bases.
//! - [`train`]: loss library, Adam, and the training loop.
//! - [`apps`]: demo applications, config parsing, level-set extraction, and
//!   CSV/SVG output.

pub mod apps;
pub mod basis;
pub mod collocation;
pub mod diff;
mod error;
pub mod linalg;
pub mod operators;
pub mod sparse;
pub mod train;

pub use error::{Error, Result};
