//! Attention-refined class activation maps for weakly-supervised
//! segmentation, trained with a noise-augmented multi-label objective.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`gradcheck`], [`snapshot`]: dense `f64`
//!   tensors, reverse-mode differentiation and its finite-difference check,
//!   and the binary snapshot format.
//! - [`model`]: the dual-branch (CNN + transformer) backbone.
//! - [`fusion`]: head/block aggregation of attention and CAM refinement.
//! - [`objective`]: losses, AdamW and the training loop.
//! - [`seeding`]: hard-threshold pseudo-labels and mIoU.
//! - [`data`]: the synthetic shapes dataset.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod kv;
pub mod model;
pub mod objective;
pub mod pgm;
pub mod resize;
pub mod runconfig;
pub mod seeding;
pub mod snapshot;
pub mod tensor;
pub mod verify;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
