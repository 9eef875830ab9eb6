//! Generative flow networks trained with divergence-aware regression losses.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dag;
pub mod envs;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod runner;
pub mod sampling;
