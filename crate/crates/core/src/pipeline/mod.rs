//! Cascade assembly, configuration, training, inference, checkpoints,
//! reports and the ablation harness.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod model;
pub mod report;
pub mod train;

pub use config::{DataConfig, RunConfig, TrainConfig};
pub use infer::{evaluate_records, McSettings, Prediction, Predictor};
pub use model::{
    batch_tensor, CascadeModel, CascadeOutput, Mode, ModelConfig, RegionOutput, TaskFlags,
};
pub use train::{prepare_split, RunRecord, Trainer};
