//! Synthetic paired point-cloud scenes for self-supervised 3D pre-training.
//!
//! The crate is organised bottom-up:
//!
//! * [`catalog`] holds the scene/category/instance categorical chain and fits
//!   it from occurrence counts.
//! * [`scenegen`] samples scene drafts (type plus object draws) and realises them as point
//!   clouds with per-object similarity transforms.
//! * [`occlusion`] removes the points furthest from a random viewpoint.
//! * [`correspondence`] picks seed points and pairs them across scenes.
//! * [`losses`] evaluates the contrastive and Chamfer objectives with
//!   analytic gradients.
//! * [`decoder`] is the small differentiable encoder plus the coarse-to-fine
//!   completion decoder, wired end to end in [`decoder::forward_backward`].
//! * [`pipeline`] drives dataset export, batch evaluation and gradient checks.
//!
//! Data-parallel loops go through [`Execution`]; with the `parallel` feature
//! disabled every mode runs sequentially and produces identical results.

// `!(x > 0.0)` is used on purpose so NaN is rejected with the bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod catalog;
pub mod correspondence;
pub mod decoder;
pub mod error;
mod exec;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod occlusion;
pub mod pipeline;
pub mod rng;
pub mod scenegen;

pub use error::{Error, Result};
pub use exec::Execution;

/// A 3D point or vector in scene units (meters).
pub type Point = nalgebra::Vector3<f64>;
