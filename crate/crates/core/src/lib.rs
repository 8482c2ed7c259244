pub mod autodiff;
pub mod cdda;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod ddm;
pub mod degradations;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod ops;
pub mod procedural;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default double-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type Graph = autodiff::Graph<f64>;
pub type GraphF32 = autodiff::Graph<f32>;
pub type Spectrum = spectral::Spectrum<f64>;
pub use autodiff::Var;
