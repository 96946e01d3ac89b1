pub mod env;
pub mod error;
pub mod model;
pub mod nn;
pub mod planner;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
