//! Survey-weighted hurdle beta-binomial inference.
//!
//! Modules, bottom up:
//! - [`special`]: digamma, trigamma and log-gamma helpers.
//! - [`bbkernel`]: beta-binomial and zero-truncated beta-binomial math.
//! - [`lkj`]: correlation Cholesky factors and the LKJ density.
//! - [`model`]: parameter layout, likelihood, prior and marginal effects.
//! - [`scores`]: analytic scores and observed information.
//! - [`infer`]: MAP with Laplace draws, HMC, convergence diagnostics.
//! - [`survey`]: weights, sandwich variance, calibration, design tests.
//! - [`simlab`]: finite-population coverage experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bbkernel;
pub mod error;
pub mod infer;
pub mod lkj;
pub mod model;
pub mod scores;
pub mod simlab;
pub mod special;
pub mod survey;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kernel.md")]
    mod kernel {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/survey.md")]
    mod survey {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
