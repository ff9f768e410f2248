//! Dense matrix arithmetic with reverse-mode gradients, seeded randomness,
//! the Adamax optimizer and parameter checkpoints.

mod adamax;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod rng;

pub use adamax::{adamax_step, Adamax, AdamaxConfig, AdamaxState};
pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{selu, sigmoid, Graph, Matrix, Var, SELU_ALPHA, SELU_LAMBDA};
pub use params::{Param, ParamId, ParamStore};
pub use rng::{NoiseSource, ReplayNoise, Rng, ZeroNoise};
