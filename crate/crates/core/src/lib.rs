//! Stacked what-where auto-encoder.
//!
//! A convnet encoder paired with a deconvnet decoder through lateral "where"
//! connections. Every pooling layer splits its input into a "what" (the pooled
//! values, fed up the encoder) and a "where" (the pooled positions, fed across
//! to the matching decoder stage). The joint loss combines a classification
//! term with input-level and intermediate reconstruction terms, so the same
//! model trains in supervised, unsupervised, or semi-supervised mode by
//! switching loss weights.
//!
//! All math is double precision with hand-written forward/backward passes;
//! `train::gradcheck` verifies every layer against central finite differences.

pub mod archdsl;
pub mod data;
pub mod error;
pub mod nn;
pub mod pooling;
pub mod rng;
pub mod swwae;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
