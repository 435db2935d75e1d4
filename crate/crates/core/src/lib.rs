//! Multi-input (face + body) age and gender estimation, built from scratch:
//! a small reverse-mode tensor engine, a VOLO-style trunk with a
//! cross-attention feature enhancer, age/gender losses and metrics,
//! face-body pairing and crop preprocessing, and crowd-vote aggregation.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod jsonl;
pub mod metrics;
pub mod nn;
pub mod pairing;
pub mod tensor;
pub mod train;
pub mod votes;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use nn::{CropPair, MiVolo, Prediction};
pub use tensor::{Graph, Tensor, Var};
