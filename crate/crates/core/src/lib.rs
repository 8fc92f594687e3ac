//! Alignment adapters for compressed encoders.
//!
//! A compressed (student) encoder's token embeddings are mapped onto a large
//! (teacher) encoder's embedding space by a small sliding-window feed-forward
//! network. The crate carries everything needed to study that at desk scale:
//! a tensor/autodiff core, toy transformer encoders with LoRA, the adapter,
//! MSE alignment training, synthetic token-level tasks with their metrics,
//! task fine-tuning in each deployment mode, and size/latency accounting.

pub mod adapter;
pub mod alignment;
pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod finetune;
pub mod gradient_suite;
pub mod numerics;
pub mod seed;
pub mod tasks;

pub use error::{Error, Result};
