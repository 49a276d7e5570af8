pub mod autograd;
pub mod cascade;
pub mod corpus;
pub mod cues;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod provider;
pub mod signal;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
