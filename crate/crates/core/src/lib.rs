//! Multi-modal self-supervised episode classification for wearable sensor
//! streams.
//!
//! Each modality is encoded into a shared latent space by its own recurrent
//! encoder, the modality embeddings are pooled by a learned importance head,
//! and an inter-modality contrastive objective aligns every modality with the
//! pooled aggregate, either as a pre-training stage or as a regularizer.

// Validation uses `!(x > 0.0)` so that NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod labeling;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod synthcohort;
pub mod timeline;
pub mod training;

pub use error::{Error, Result};
