//! Pair-relationship recognition from still images.
//!
//! A pair of people is scored by a pair branch (person crops, union crop,
//! box geometry) and a context branch that attends over contextual regions
//! of the image. Training supports hard-label and soft-label losses,
//! including the adaptive focal loss for ambiguous annotations.

pub mod attention;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod proposals;
pub mod types;

pub use error::{Error, Result};
