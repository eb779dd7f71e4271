//! Sparse-attention machinery for coarse-to-fine 3D reconstruction from
//! posed images: tokenizers, spatial block partitions, gated sparse attention,
//! 3D-aware block routing, a two-stage pipeline and block-aware sequence
//! parallelism, each with a dense or brute-force reference implementation.

pub mod attention;
pub mod blocks;
pub mod error;
pub mod geometry;
pub mod golden;
pub mod harness;
pub mod interp;
pub mod nsa;
pub mod oracle;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod routing;
pub mod scene;
pub mod tensor;
pub mod tokenizer;

pub use error::{LsrmError, Result};
