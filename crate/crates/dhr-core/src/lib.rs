//! Mask-refinement pipeline for weakly-supervised segmentation outputs.
//!
//! The library consumes serialized class activation maps, a degraded base
//! mask, and two dense feature fields per image, and produces a rebalanced
//! mask in which small classes adjacent to larger ones survive:
//!
//! 1. optimal-transport gating of the CAMs recovers seed regions and the
//!    vanished classes are merged back into the base mask,
//! 2. unsupervised features rebalance the mask across semantic families,
//! 3. weakly-supervised features split the classes within each family, and
//! 4. a pluggable boundary refiner aligns the result to image structure.
//!
//! [`synth`] generates deterministic scenes that exhibit the failure mode,
//! so the whole path is testable without trained networks, and [`eval`]
//! scores the outputs.

pub mod error;
pub mod eval;
pub mod mask_png;
pub mod npy;
pub mod ot;
pub mod pipeline;
pub mod rebalance;
pub mod refine;
pub mod scene;
pub mod seed;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
