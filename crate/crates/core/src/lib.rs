pub mod data;
pub mod decode;
pub mod engine;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod objectives;
pub mod tensor;

pub use error::{Error, Result};
