//! Temporal-profile infrared small target detection toolkit.

pub mod attribution;
pub mod components;
pub mod container;
pub mod error;
pub mod metrics;
pub mod network;
pub mod profile;
pub mod runtime;
pub mod simulator;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
