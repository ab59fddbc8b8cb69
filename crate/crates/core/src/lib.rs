//! Fully first-order bilevel optimization with adaptive step sizes.
//!
//! The outer loop ([`driver::solve`]) approximates the hypergradient of
//! `φ(x) = min_{y ∈ S(x)} f(x, y)` from two inner solves, one on the
//! lower-level objective `g(x, ·)` and one on the penalty `σ f(x, ·) + g(x, ·)`,
//! and takes AdaGrad-Norm steps on `x`. The inner problems are solved with
//! AdaGrad-Norm or the auto-conditioned gradient method ([`subsolvers`]), so no
//! smoothness or PŁ constant is needed to run it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod driver;
pub mod error;
pub mod hypergradient;
pub mod linalg;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod subsolvers;
pub mod vector;

pub use driver::{solve, sweep, SolveReport, SolverConfig, Variant};
pub use error::{Error, Result};
pub use oracle::{BilevelProblem, ProblemConstants};
pub use vector::Vector;
