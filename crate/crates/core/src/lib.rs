pub mod align;
pub mod container;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod reference;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
