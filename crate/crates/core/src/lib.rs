// SPDX-License-Identifier: Apache-2.0

//! Continual out-of-distribution detection with searched score thresholds.
//!
//! A cosine-head classifier flags inputs whose top class score falls below
//! `mu_c - eta * sigma_c`. The scale `eta` is chosen by a linear search over
//! negative Z-scores: first by leave-one-class-out cross-validation over the
//! in-distribution classes, then refreshed by running averages as novel
//! classes are detected and accommodated.

pub mod continual;
pub mod data;
pub mod error;
pub mod model;
pub mod oracle;
pub mod reporting;
pub mod scoring;
pub mod search;
pub mod stats;

pub use error::{Error, Result};
