//! Doctest harness for the book under `book/`.
//!
//! mdBook cannot run snippets against local crates, so each chapter is
//! included here as module documentation and `cargo test --doc -p guide`
//! compiles and runs every fenced Rust block. A failing snippet points at
//! the chapter module it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors-and-autodiff.md")]
pub mod tensors_and_autodiff {}

#[doc = include_str!("../../../book/src/patch-tokens.md")]
pub mod patch_tokens {}

#[doc = include_str!("../../../book/src/two-branches.md")]
pub mod two_branches {}

#[doc = include_str!("../../../book/src/token-fusion.md")]
pub mod token_fusion {}

#[doc = include_str!("../../../book/src/counting-cost.md")]
pub mod counting_cost {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/file-formats.md")]
pub mod file_formats {}
