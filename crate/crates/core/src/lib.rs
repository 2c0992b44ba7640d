pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod retention;
pub mod state_store;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
