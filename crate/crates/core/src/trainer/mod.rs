//! Optimization loop, staged fine-tuning, checkpointing, and evaluation.

pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod run;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use data::{synthetic_dataset, Dataset, SYNTHETIC_CLASS_COUNT, SYNTHETIC_SIDE};
pub use optim::{OptimizerState, SgdHyper};
pub use run::{
    evaluate, finetune_stage, run_training, train_epoch, EpochMetrics, EvalMetrics, OverlayPools,
    Stage, SuperclassAssets, TrainConfig,
};
