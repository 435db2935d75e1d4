//! Model: parameters, VOLO building blocks, face/body fusion and checkpoints.

pub mod checkpoint;
pub mod fusion;
pub mod layers;
pub mod params;
pub mod volo;

pub use fusion::{CropPair, FeatureEnhancer, MiVolo, Prediction};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use volo::{GridShape, HeadOutput};
