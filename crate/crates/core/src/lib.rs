pub mod attention;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod imageops;
pub mod lens;
pub mod model;
pub mod npy;
pub mod pipeline;

pub use error::{Error, Result};
