pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod losses;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
