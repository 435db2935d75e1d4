//! Losses, label-distribution smoothing weights and evaluation metrics.

pub mod eval;
pub mod lds;
pub mod losses;

pub use eval::{age_to_class, cs_at, gender_accuracy, mae, per_bin_mae, ClassRanges, MetricsReport};
pub use lds::LdsWeights;
pub use losses::{combined_loss, gender_loss, weighted_mse, AgeNormalizer};
