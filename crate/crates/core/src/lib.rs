//! Similarity search over clinical-trial protocols.
//!
//! Protocols are summarized into question/answer pairs ([`qa`]), encoded
//! into unit vectors ([`encoder`]), fine-tuned with Q/A-level and
//! trial-level contrastive objectives ([`training`]), and ranked by cosine
//! similarity ([`retrieval`]). [`evaluation`] scores rankings with bootstrap
//! confidence and provides lexical baselines.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for common use.

pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod linalg;
pub mod model;
pub mod qa;
pub mod retrieval;
pub mod scalar;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar used by the command-line pipeline.
pub type Real = f64;

pub type TinyEncoder64 = encoder::TinyEncoder<f64>;
pub type TinyEncoder32 = encoder::TinyEncoder<f32>;
pub type TrialIndex64 = retrieval::TrialIndex<f64>;
