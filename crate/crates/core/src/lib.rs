//! Weakly-supervised segmentation from image-level labels.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense 2D fields, sparse affinity / transition matrices, seeded RNG, file formats.
//! - [`synth`]: synthetic co-occurrence datasets with latent sub-types and ground truth.
//! - [`nn`]: a small strided CNN with primary and sub-class 1x1 heads, BCE loss, SGD + one-cycle.
//! - [`sce`]: frozen-feature clustering into sub-classes, joint training, CAM extraction.
//! - [`oracle`]: point-prompt mask backends (synthetic structural oracle, on-disk mask store).
//! - [`pam`]: prompt-mask affinity, transition matrices and random-walk CAM refinement.
//! - [`eval`]: Dice, Jaccard, ASSD and HD95.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod nn;
pub mod numerics;
pub mod oracle;
pub mod pam;
pub mod sce;
pub mod synth;

pub use error::{Error, Result};
pub use numerics::{Field2D, LabelMap, SeededRng, SparseMatrix};
