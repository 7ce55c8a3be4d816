pub mod autodiff;
pub mod cli;
pub mod error;
pub mod formation;
pub mod gbl;
pub mod image_tensor;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod selftest;
pub mod ssm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image_tensor::ImageTensor;
pub use tensor::Tensor;
