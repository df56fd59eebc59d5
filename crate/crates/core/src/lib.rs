//! Regularized Wasserstein estimation with O(1)-per-step stochastic dual ascent.
//!
//! Given an observed measure `mu`, a prior `beta` and a cost matrix `C`, the
//! estimator minimizes `OT_eps(mu, nu) + eta KL(nu, beta)` over measures `nu`
//! supported on the atoms of `beta`. The solvers work on the concave dual
//! [`dual::Problem::eval_f`] with unbiased single-pair stochastic gradients.
//!
//! - [`simplex`]: averaged SGD over the whole simplex.
//! - [`mixture`]: estimation over the convex hull of fixed component measures.
//! - [`barycenter`]: regularized barycenters of several input measures.
//! - [`oracle`]: deterministic reference solvers used for validation.

pub mod barycenter;
pub mod dual;
pub mod error;
pub mod instances;
pub mod measures;
pub mod mixture;
pub mod oracle;
pub mod simplex;

#[cfg(test)]
pub(crate) mod testutil;

pub use dual::{DualState, Problem, ProblemConstants};
pub use error::{Error, Result};
pub use measures::{CostFunction, CostMatrix, DiscreteMeasure, RegParams, SupportPoints};
