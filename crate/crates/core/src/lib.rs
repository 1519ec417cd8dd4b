//! Relational graph variational autoencoders for knowledge graphs.

pub mod checks;
pub mod distmult;
pub mod error;
pub mod experiments;
pub mod kg;
pub mod linkpred;
pub mod matching;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
