//! Configurable random weight networks for continual learning.
//!
//! A model holds fixed random bases generated from a seed. Each task learns
//! only a context vector per layer plus a shared gain, so earlier tasks are
//! never disturbed by later training.

pub mod datasets;
pub mod error;
pub mod flyenc;
pub mod harness;
pub mod nets;
pub mod neuromod;
pub mod optim;
pub mod rngcore;
pub mod scalar;

pub use error::{CrwnError, Result};
pub use scalar::{Precision, Scalar};

pub type ModelF32 = nets::Model<f32>;
pub type ModelF64 = nets::Model<f64>;
pub type ContextStoreF32 = neuromod::ContextStore<f32>;
pub type ContextStoreF64 = neuromod::ContextStore<f64>;
pub type TaskContextF32 = neuromod::TaskContext<f32>;
pub type TaskContextF64 = neuromod::TaskContext<f64>;
