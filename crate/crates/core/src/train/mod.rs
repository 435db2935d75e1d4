//! Training: objective, optimizer, augmentation, data and the loop.

pub mod augment;
pub mod dataset;
pub mod init;
pub mod objective;
pub mod optimizer;
pub mod synth;
pub mod trainer;

pub use dataset::{Dataset, SampleRecord};
pub use init::init_from_single_input;
pub use objective::{batch_loss, loss_and_grads, Grads, LabeledPair};
pub use optimizer::{warmup_lr, AdamW};
pub use trainer::{evaluate, train, Control, EvalMode, Evaluation, StepLog, TrainSummary};
