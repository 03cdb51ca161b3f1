pub mod align;
pub mod diffusion;
pub mod fmt;
pub mod harness;
pub mod nn;
pub mod scalar;
pub mod sim;
pub mod tensor;
pub mod wrench;

pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Policy32 = diffusion::Policy<f32>;
pub type Policy64 = diffusion::Policy<f64>;
