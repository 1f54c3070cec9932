//! A dual-branch multi-scale vision transformer with cross-attention token
//! fusion, built on a minimal reverse-mode autodiff tensor engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — dense `f64` tensors, the operation tape, and reverse-mode
//!   gradients. Everything above it is written in terms of these ops.
//! * [`blocks`] — patch tokenizers, CLS/position embeddings, multi-head
//!   self-attention, feed-forward blocks, and the pre-LN encoder block.
//! * [`fusion`] — the four schemes for exchanging information between the
//!   two branches, including the linear-time cross-attention module.
//! * [`model`] — branch assembly, dual heads, checkpoints, and resolution
//!   adaptation.
//! * [`analysis`] — closed-form parameter/FLOP/attention-map accounting,
//!   checked against instrumented forwards.
//! * [`data`], [`train`], [`gradcheck`] — the desk-scale harness: datasets,
//!   SGD with warmup+cosine schedule, and finite-difference checking.
//!
//! See the guide under `book/` for a narrative walk-through, and the
//! `crossvit` binary for the command-line interface.

pub mod analysis;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
