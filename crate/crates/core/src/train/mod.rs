//! Desk-scale training: flat-file configs, stem-paired datasets, binary
//! checkpoints, procedural scenes, and the AdamW loop with its overfit
//! harness.

mod checkpoint;
mod config;
mod dataset;
mod synth;
mod trainer;

pub use checkpoint::{Checkpoint, OptimSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use dataset::{
    DatasetIndex, LoadedDataset, TrainPair, NORMALIZE_HIGH_PERCENTILE, NORMALIZE_LOW_PERCENTILE,
};
pub use synth::{gamma_target, synth_hdr_scene, write_synthetic_dataset, SYNTH_GAMMA};
pub use trainer::{LossValues, OverfitReport, TrainLogRecord, Trainer, OVERFIT_TARGET_DB};
