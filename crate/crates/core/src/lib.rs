//! Synchronous federated averaging simulator with per-client representation
//! matching and server-side online REINFORCE hyper-parameter tuning.

pub mod data;
pub mod error;
pub mod fed;
pub mod gradcheck;
pub mod hyper;
pub mod losses;
pub mod model_zoo;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{ForwardTrace, LayerSpec, ModelGraph, ParamSet, PoolSwitches};
pub use tensor::Tensor;
