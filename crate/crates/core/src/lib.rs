pub mod bench;
pub mod editors;
pub mod error;
pub mod eval;
pub mod lm;
pub mod optim;
pub mod overtone;
pub mod tensor;

pub use error::{Error, Result};
