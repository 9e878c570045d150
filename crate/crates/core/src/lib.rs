//! Momentum contrastive self-supervised learning with combinatorial patches.
//!
//! The online branch divides each augmented view into an `m x m` grid, encodes
//! every patch on its own, and averages (or otherwise combines) all
//! `n`-subsets of patch embeddings. Each combined embedding is contrasted
//! against the target branch's embedding of the other view, so a single image
//! pair yields `C(m^2, n)` positive pairs per direction.
//!
//! Everything runs on a small reverse-mode tensor engine ([`tensor`]) so the
//! whole training step can be checked against finite differences.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod patch;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tape, Tensor, Var};
