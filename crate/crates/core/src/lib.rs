pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod text;
pub mod train;
