//! Dual part-aligned feature blocks for person retrieval, on a minimal
//! reverse-mode autodiff engine.
//!
//! The crate is organized as:
//! - [`tensor`], [`graph`], [`ops`], [`optim`], [`gradcheck`], [`checkpoint`]
//!   — the dense-tensor engine: forward kernels, tape-based backward,
//!   SGD with momentum, finite-difference verification, parameter files.
//! - [`masks`] — parsing label maps, category grouping, confidence maps.
//! - [`dpb`] — the dual part-aligned block: human part branch, latent
//!   self-attention branch (optionally masked), residual fusion.
//! - [`losses`] — softmax cross-entropy and batch-hard triplet loss.
//! - [`metrics`] — single-query retrieval evaluation (CMC, mAP).

pub mod checkpoint;
pub mod dpb;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod pnm;
pub mod scalar;
pub mod tensor;

pub use error::{CoreError, Result};
pub use graph::{zero_grads, Graph, TapeOp};
pub use ops::{BatchNorm, BnMode};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
