pub mod autograd;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod objectives;
pub mod reference;
pub mod rng;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
