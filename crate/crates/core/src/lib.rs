//! Discriminability-driven graph enhancement of two-stream snippet features
//! for weakly-supervised temporal action localization.

// `!(x >= 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod base_model;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
