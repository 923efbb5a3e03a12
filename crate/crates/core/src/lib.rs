//! Hierarchical alignment transformers for image-text retrieval, at a scale
//! that fits on a desk.
//!
//! Two independent transformer encoders (a text encoder and a hierarchical
//! patch-merging image encoder) expose token features at several depths.
//! At every depth the two token sets are aligned with stacked cross
//! attention, and the per-depth similarities are summed into one score.
//! The score is trained with a bidirectional triplet ranking loss and
//! evaluated with Recall@K.

pub mod alignment;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod objective;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Mat, Tape, Var};
