//! Core of a generative framework for multimodal aspect-based sentiment
//! analysis.
//!
//! A single encoder-decoder reads image regions and text together and is
//! trained on five pre-training objectives (masked language modeling,
//! aspect-opinion extraction, masked region modeling, adjective-noun pair
//! generation, post-level sentiment prediction) before being fine-tuned on
//! three index-generation tasks (joint aspect-sentiment extraction, aspect
//! term extraction, aspect sentiment classification).
//!
//! The crate is `no_std` and only needs `alloc`. File formats, checkpoints
//! and the command line live in the companion `mabsa` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod codec;
pub mod corpus;
mod error;
pub mod features;
pub mod graph;
pub(crate) mod math;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod vocab;
pub mod weak_label;

pub use error::{Error, Result};
pub use graph::{grad_check, Graph, Var};
pub use tensor::Tensor;
