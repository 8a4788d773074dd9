pub mod comm;
pub mod dispatch;
pub mod error;
pub mod expert;
pub mod gate;
pub mod moe_layer;
pub mod param_sync;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{IndexMatrix, Matrix};
