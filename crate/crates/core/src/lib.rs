//! Speaker-embedding backend built from layer attentive pooling over the
//! hidden-state stack of a pretrained speech encoder, followed by attentive
//! statistics pooling over time.
//!
//! The crate also carries the training objective (sub-center additive
//! angular margin softmax with an inter-top-k penalty), a desk-scale training
//! loop on synthetic layer stacks, and the verification scoring toolkit.

pub mod embedder;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod pooling;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
