//! Sparse-feature encoding models for naturalistic brain data.
//!
//! The crate covers the full analysis chain: sparse autoencoder training on
//! activation matrices, feature-label reliability audits, HRF alignment of
//! word-level features to scan time, voxelwise ridge encoding with nested
//! cross-validation, variance partitioning and Shapley attribution,
//! mean-ablation patching, topography convergence statistics, cross-layer
//! prediction errors, and mixed-effects reading-time models. Planted-truth
//! generators in [`synth`] make every stage verifiable at desk scale.

pub mod error;
pub mod matio;
pub mod sae;
pub mod synth;

mod linalg;

pub use error::{Error, Result};
