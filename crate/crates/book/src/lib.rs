//! Compiles and runs the code listings of the guide in `book/`.
//!
//! mdbook cannot test listings that depend on a local crate, so each
//! chapter is included here as a module doc and checked by `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("../../../book/src/embeddings.md")]
pub mod embeddings {}

#[doc = include_str!("../../../book/src/encoders.md")]
pub mod encoders {}

#[doc = include_str!("../../../book/src/head.md")]
pub mod head {}

#[doc = include_str!("../../../book/src/tracking.md")]
pub mod tracking {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
