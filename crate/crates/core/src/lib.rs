pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiments;
mod error;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{ErrorCategory, FanError, Result};
