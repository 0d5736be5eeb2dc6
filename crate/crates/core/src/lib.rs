pub mod attention;
pub mod cli;
pub mod error;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
