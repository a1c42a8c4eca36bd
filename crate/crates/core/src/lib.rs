pub mod baselines;
pub mod buffer;
pub mod clu;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod task;
pub mod verification;

pub use error::{CluError, Result};
