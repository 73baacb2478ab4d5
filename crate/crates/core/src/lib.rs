//! Cross-task adversarial patches crafted against a scene-graph model.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), a
//! synthetic scene generator ([`scene`]), a trainable scene-graph model
//! ([`sgg`]), independently trained captioning / relation-QA models
//! ([`downstream`]), the patch attack itself ([`attack`]) and the evaluation
//! harness ([`eval`]).

pub mod attack;
pub mod downstream;
pub mod error;
pub mod eval;
pub mod rng;
pub mod nn;
pub mod pipeline;
pub mod scene;
pub mod sgg;
pub mod tensor;

pub use error::{Error, Result};
