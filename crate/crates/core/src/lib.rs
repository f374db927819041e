//! Hysteresis regularization of planar piecewise-smooth systems.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod model;
pub mod pws;
pub mod regfun;
pub mod roots;
pub mod flow;
pub mod sliding;
pub mod atlas;
pub mod charts;
pub mod sweep;
pub mod grazing;
pub mod config;
pub mod cli;
