//! Siamese cascaded region-proposal tracker.
//!
//! A template image is matched against a search image through a shared
//! convolutional backbone. A cascade of region-proposal stages runs from the
//! deepest feature level to the shallowest: each stage scores a shared anchor
//! set, discards confident negatives, and regresses the survivors' boxes,
//! which become the next stage's anchors. Fused features flow between stages
//! through learned transfer blocks. Everything runs on the CPU with the
//! in-crate tensor kernels; training, tracking and evaluation are all here.

pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
