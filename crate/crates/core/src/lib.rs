//! Depth-based object instance recognition with a fixed multiplicative
//! template layer.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); aliases for both precisions are exported below.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod network;
pub mod objective;
pub mod orthopatch;
pub mod scalar;
pub mod synthgen;
pub mod template_layer;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
pub use network::{ArchConfig, ForwardTrace, NetworkParams, ParamGrads};
pub use objective::{HeadMode, PoseGrid, SoftLabel};
pub use scalar::Scalar;
pub use template_layer::TemplateBank;
pub use tensor::Tensor;
pub use training::TrainConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type NetworkParams32 = NetworkParams<f32>;
pub type NetworkParams64 = NetworkParams<f64>;
pub type ForwardTrace32 = ForwardTrace<f32>;
pub type ForwardTrace64 = ForwardTrace<f64>;
pub type ParamGrads32 = ParamGrads<f32>;
pub type ParamGrads64 = ParamGrads<f64>;
