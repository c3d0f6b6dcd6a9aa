pub mod diffusion;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod render;
pub mod session;
pub mod stroke;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
