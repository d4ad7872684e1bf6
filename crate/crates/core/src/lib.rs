pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
