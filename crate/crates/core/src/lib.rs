pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod optim;
pub mod qlinear;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
