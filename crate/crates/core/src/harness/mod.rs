//! Experiment orchestration: configuration, datasets, the training loop,
//! metrics and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use data::make_dataset;
pub use metrics::{energy_distance, tracked_vlb, RunMetrics, VlbProbe};
pub use train::{train, train_into, ForwardCounts, TrainOutput};
