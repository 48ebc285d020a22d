//! Configuration, training and evaluation of complete runs.

pub mod adam;
pub mod config;
pub mod evaluate;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{apply_override, RunConfig};
pub use evaluate::{evaluate, load_images, load_model, write_evaluation, Evaluation, ModelMeta};
pub use train::{prepare_splits, run_root, train, DataSplits, EpochRecord, TrainState, TrainSummary};

#[cfg(test)]
mod tests;
