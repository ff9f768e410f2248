//! Cross-level information transmission between two feature domains of the
//! same samples, with masked multi-task regression on top.
//!
//! A variational encoder is trained on the richer ("high") domain and then
//! frozen. A second encoder for the poorer ("low") domain is pre-trained so
//! that a small transmitter network maps its codes onto the frozen high
//! codes, and the resulting low-domain model is fine-tuned with gradual
//! unfreezing.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
