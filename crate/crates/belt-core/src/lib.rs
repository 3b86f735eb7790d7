//! Backdoor exclusivity: measurement and lifting.
//!
//! This crate implements the full loop of a trigger-exclusivity study on
//! desk-scale image classifiers:
//!
//! * [`trigger`] — trigger-injection algebra: patch and blended triggers,
//!   perturbed injection, per-element perturbation boundaries, and fuzzy
//!   "cover" trigger construction.
//! * [`dataset`] — synthetic class-blob datasets, a packed binary tensor
//!   format, and image-directory loading.
//! * [`poison`] — assembling clean + dirty + cover training mixtures with a
//!   reproducible provenance manifest.
//! * [`nn`] / [`model`] — a small strided CNN with explicit forward and
//!   backward passes in `f64`, split into a feature extractor and a linear
//!   head, with binary checkpointing.
//! * [`train`] — the poisoned-training objectives: relabeled cross-entropy,
//!   momentum class centers, and the center-matching regularizer.
//! * [`excl`] — the constrained perturbation optimizer that estimates each
//!   sample's maximal still-activating trigger distortion, and the resulting
//!   exclusivity score.
//! * [`defense`] — desk-scale reimplementations of trigger reverse
//!   engineering (per-class mask/pattern recovery with an anomaly index) and
//!   entropy-based input screening.
//!
//! Everything that consumes randomness takes an explicit seed and derives
//! named substreams from it, so any result in the crate is reproducible from
//! the seed alone.

pub mod dataset;
pub mod defense;
pub mod error;
pub mod excl;
pub mod model;
pub mod nn;
pub mod poison;
pub mod seed;
pub mod train;
pub mod trigger;

/// An image tensor, `[channels, height, width]`, values usually in `[0, 1]`.
pub type Image = ndarray::Array3<f64>;

pub use error::{Error, Result};
