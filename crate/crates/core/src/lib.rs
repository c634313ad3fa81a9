//! Label-smoothing losses, selective-classification metrics and post-hoc
//! logit normalisation, with a small synthetic trainer for end-to-end checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod losses;
pub mod manifest;
pub mod normalization;
pub mod repro;
pub mod scores;
pub mod selective;
pub mod trainer;

pub use error::{Error, Result};
