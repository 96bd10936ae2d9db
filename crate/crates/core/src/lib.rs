pub mod backman;
pub mod ebp;
pub mod error;
pub mod nash;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
