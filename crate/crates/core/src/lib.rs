//! Self-supervised pretraining with a global VICReg criterion plus
//! location-based and feature-based local matching losses.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: view sampling, cropping and feature-cell coordinates
//! - [`matching`]: nearest-neighbor correspondences and top-γ filtering
//! - [`losses`]: VICReg terms, local losses, two-view and multi-crop criteria
//! - [`nn`] and [`model`]: layers with manual backprop, encoder and heads
//! - [`data`]: synthetic shapes dataset and file formats
//! - [`trainer`]: schedule, optimizers, training loop, metrics, checkpoints
//! - [`eval`]: frozen linear probes and mIoU
//! - [`verify`]: independent oracles and the verification suite

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
