//! Nonlinearity-ablated decoder-only transformers on a small reverse-mode
//! autodiff engine, with entropy regularization, FLOPs accounting and a
//! byte-level training harness.

pub mod autodiff;
pub mod config;
pub mod cost;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use config::{FfnVariant, LeakySlopeMode, ModelConfig, Nonlinearity, Stabilizer};
pub use entropy::{EntropyRegConfig, EntropySnapshot, RegMode};
pub use error::{AeroError, Result};
pub use model::{ForwardOptions, ForwardTrace, Model};
pub use tensor::Tensor;
