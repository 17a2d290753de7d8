pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod training;

pub use error::{Error, Result};
