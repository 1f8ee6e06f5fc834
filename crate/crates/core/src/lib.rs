pub mod audio;
pub mod autodiff;
mod binio;
pub mod conformer;
pub mod ctc;
pub mod dcim;
pub mod error;
pub mod experiments;
pub mod model;
pub mod nn;
pub mod runconfig;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod visual;

pub use binio::fnv1a64;
pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
