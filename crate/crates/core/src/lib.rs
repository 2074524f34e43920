//! Hyperspherical embeddings for encoder–decoder point-cloud completion.
//!
//! The crate bundles a small reverse-mode differentiation engine ([`tape`]),
//! the hypersphere module ([`hypersphere`]), a PointNet-style encoder with a
//! folding decoder and a classification head ([`netblocks`]), losses and
//! optimizers, multi-task loss combination, embedding-geometry diagnostics,
//! a synthetic shape dataset, and the experiment harness driving them.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasynth;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod hypersphere;
pub mod losses;
pub mod multitask;
pub mod netblocks;
pub mod optim;
pub mod svd;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{GradientMap, NodeId, Tape};
pub use tensor::Tensor;
