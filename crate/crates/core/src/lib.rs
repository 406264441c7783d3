pub mod cli;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod loocv;
pub mod nets;
pub mod pgm;
pub mod phantom;
pub mod prep;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
