pub mod cli;
pub mod data_model;
pub mod dgp;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod intervention;
pub mod neural;
pub mod numerics;

pub use error::{Error, Result};
