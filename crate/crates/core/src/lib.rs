pub mod classify;
pub mod cli;
pub mod codec;
pub mod crowdsim;
pub mod coherence;
pub mod error;
pub mod evaluate;
pub mod factorization;
pub mod labels;
pub mod linalg;
pub mod rng;
pub mod shades;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
