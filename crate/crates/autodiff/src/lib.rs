//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors.
//!
//! Everything is generic over [`Scalar`]; models train in `f32` and are
//! gradient-checked in `f64`. Concrete aliases are provided for both.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod scalar;
pub mod suite;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_params, relative_error, relative_error_floor, ParamCheck};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::{checked_lr, Adam, LearningRate, NoamSchedule};
pub use params::{uniform, xavier_uniform, ParamGrads, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use suite::primitive_suite;
pub use tensor::{sinusoidal_positions, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
