pub mod error;
pub mod harness;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod tasks;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

/// 64-bit instantiations used by the harness and every tolerance check.
pub type Tensor = numerics::Tensor<f64>;
pub type Model = model::TransformerLm<f64>;
pub type Adapted = lora::AdaptedModel<f64>;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Model32 = model::TransformerLm<f32>;
pub type Adapted32 = lora::AdaptedModel<f32>;
