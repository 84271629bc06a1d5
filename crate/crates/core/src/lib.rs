//! Dual student-teacher feature pyramid matching for unsupervised anomaly
//! detection and localization.
//!
//! The pipeline distills a frozen teacher into a student on normal images
//! only, twice: one student mirrors its teacher's architecture (the classic
//! feature-pyramid-matching pair), the other reconstructs a deeper teacher's
//! feature pyramid from the first teacher's 1/32 bottleneck. Per-level
//! feature disagreement yields six anomaly maps that fuse (add within a
//! resolution, multiply across resolutions) into a final per-pixel score
//! field; the image-level score is its maximum.

pub mod anomaly;
pub mod backbones;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod nn;

pub use error::{Error, Result};
