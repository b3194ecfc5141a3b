//! Inverse noise extraction and noise-guided editing for a toy next-scale
//! token model. `inversion` recovers Gumbel noise that reproduces a token
//! pyramid exactly; `editing` mixes it with fresh noise under a new prompt.

pub mod codec;
pub mod demo;
pub mod editing;
pub mod error;
pub mod gumbel;
pub mod harness;
pub mod inversion;
pub mod logits;
pub mod metrics;
pub mod predictor;
pub mod rng;

pub use error::{Error, Result};
