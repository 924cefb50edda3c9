pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod format;
pub mod improve;
pub mod model;
pub mod optim;
pub mod reward;
pub mod seed;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
