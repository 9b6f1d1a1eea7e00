pub mod baselines;
pub mod diffcore;
pub mod error;
pub mod encoder;
pub mod gp_prior;
pub mod operator_decoder;
pub mod objectives;
pub mod plot;
pub mod problems;
pub mod trainer;

pub use error::{Error, Result};
