//! SimMatch-style semi-supervised learning at desk scale.
//!
//! Pseudo-labels are built from two views of the same unlabeled sample: the
//! class distribution predicted by a classifier head and the similarity
//! distribution of a projection embedding against a memory buffer of labeled
//! embeddings. The two are calibrated against each other through the
//! unfold/aggregate operators in [`propagation`].

// `!(x > 0.0)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod codec;
pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod propagation;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
