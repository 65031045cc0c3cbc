//! Single-branch self-supervised pretraining by non-parametric instance
//! discrimination.
//!
//! Every training image is its own class. Class weights live in a memory
//! bank initialized from the untrained encoder and moved along the
//! negative summed cross-entropy gradient; a square-root self-distillation
//! term spreads gradient over the non-target rows.

pub mod ablation;
pub mod bank;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
