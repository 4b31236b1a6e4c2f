//! Deterministic federated training and unlearning testbed.
//!
//! A small causal transformer LM (RoPE attention, RMSNorm, GELU MLP) is
//! trained by round-based federated averaging over synthetic per-client
//! dialect data, then selected clients are unlearned with gradient-ascent,
//! NPO, SimNPO, or task-vector negation. Everything is reproducible from a
//! single seed: the same configuration yields bitwise-identical parameters
//! whether the federation runs in-process or over TCP.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod fed;
pub mod merge;
pub mod model;
pub mod net;
pub mod objectives;
pub mod optim;
pub mod permute;
pub mod rng;
pub mod rope;
pub mod tensor;

pub use error::{Error, Result};
pub use model::ModelConfig;
pub use rng::Rng;
pub use tensor::{NamedTensors, Tensor};
