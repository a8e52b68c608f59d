pub mod autodiff;
pub mod config;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod hvcn;
pub mod ivn;
pub mod kernels;
pub mod metrics;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod pyramid;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod vfcn;

pub use error::{Error, Result};
pub use tensor::Tensor;
