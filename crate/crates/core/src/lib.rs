//! Center-based BEV detection heads on synthetic LiDAR-like scenes.
//!
//! The crate covers exact rotated-box geometry, a scene generator, per-attribute
//! label assignment, a small hand-differentiated head with an optional
//! objectness-gated IoU branch, decoding, metrics and an experiment runner.

pub mod assign;
pub mod decode;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
