//! Few-shot classification by generating the weights of a matching network
//! from a task's support set.
//!
//! A [`metanet::MetaNet`] encodes the support points of a task into a latent
//! context distribution, samples a context and maps it to the layer weights of
//! a small matching classifier ([`targetnet`]). Training
//! ([`training::ModelState`]) runs episodes over synthetic 2D datasets
//! ([`data`]); [`eval`] holds the evaluation and export tools used by the
//! `lgmnet` binary.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metanet;
pub mod optim;
pub mod params;
pub mod tape;
pub mod targetnet;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
