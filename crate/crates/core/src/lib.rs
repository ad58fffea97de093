//! Training engine for part-based multi-class image classifiers.
//!
//! The pipeline has three stages:
//!
//! 1. [`partgen`] draws a large pool of whitened random parts from training
//!    images.
//! 2. [`select`] trains part weights with a smoothed group-lasso penalty and
//!    keeps the parts whose weight groups survive.
//! 3. [`jointtrain`] alternates between a multi-class SVM over part responses
//!    and a concave-convex minimization over the shared part filters. The
//!    convex bound is minimized by hard-example caching ([`cache`]) on top of a
//!    1-slack cutting-plane QP solver ([`qpsolver`]).
//!
//! [`features`] builds the feature pyramids the parts are placed in, and
//! [`model`] holds the scoring rule.

pub mod cache;
pub mod error;
pub mod eval;
pub mod features;
pub mod jointtrain;
pub mod model;
mod par;
pub mod partgen;
pub mod qpsolver;
pub mod select;
pub mod synth;

pub use error::{Error, Result};
