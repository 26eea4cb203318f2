//! Style-based channel recalibration on a small reverse-mode autodiff
//! engine, with residual network builders, complexity accounting, training
//! and post-hoc gate analysis.

pub mod analysis;
pub mod autograd;
pub mod complexity;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod params;
pub mod recalib;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
