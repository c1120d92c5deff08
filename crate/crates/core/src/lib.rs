//! Data-free merging of fine-tuned checkpoints.
//!
//! Each linear layer is merged independently by minimizing the weighted
//! interference objective `Σ_i w_i ‖(τ_m − τ_i)·τ_iᵀ‖_F²`, where `τ_i` is
//! expert `i`'s task vector on that layer. The rows of a task vector stand
//! in for the (unavailable) inputs the expert was fine-tuned on.

pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod merge;
pub mod solver;
pub mod synth;
pub mod task_vector;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
