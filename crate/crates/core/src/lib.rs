//! Uncertainty-reweighted knowledge distillation.
//!
//! A student network distils a teacher while an auxiliary linear head on one
//! of the student's early layers estimates per-example uncertainty. That
//! uncertainty, either the head's confidence margin or the entropy of a
//! Monte-Carlo averaged Gaussian logit predictive, reweights the distillation
//! loss. Evaluation focuses on worst-group accuracy under a planted spurious
//! correlation.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod io;
pub mod laplace;
pub mod metrics;
pub mod network;
pub mod numerics;

pub use error::{Error, Result};
