//! One-stream transformer tracker with explicit visual prompts.
//!
//! The tracker fuses template tokens, search tokens and a handful of prompt
//! tokens in a single transformer encoder. Prompts come from two
//! generators: a multi-scale one that patchifies the template at three
//! patch sizes, and a spatio-temporal one that pools a block of state
//! tokens carried from frame to frame. The state is refreshed on every
//! frame by a small encoder, so there is no template-update rule to tune.
//!
//! Everything runs on [`tensor::Tape`], a small reverse-mode autodiff engine.

pub mod config;
pub mod data;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod head;
pub mod image;
pub mod io;
pub mod model;
pub mod nn;
pub mod params;
pub mod prompts;
pub mod rng;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use model::{Model, ModelConfig};
