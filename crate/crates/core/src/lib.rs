pub mod autodiff;
pub mod bnn;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod kernel;
pub mod samplers;
pub mod streams;
pub mod targets;
pub mod vis;

pub use error::{Error, Result};
