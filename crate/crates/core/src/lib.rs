pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
