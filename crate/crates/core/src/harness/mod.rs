//! Experiment harness: synthetic data, training, checkpoints, configuration,
//! and the command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{gen_dataset, load_dataset, Dataset, DatasetSpec, ShapeClass, SyntheticScene};
pub use train::{train, AdaBelief, ResumeState, TrainConfig, TrainOutcome};
