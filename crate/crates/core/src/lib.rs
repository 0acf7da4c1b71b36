//! Multimodal recommendation with spherical feature fusion, graph
//! propagation and an alignment plus calibrated-uniformity objective.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graphs;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
