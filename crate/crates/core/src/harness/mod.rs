//! Configuration, model assembly, optimisation, checkpoints, training,
//! evaluation and ablation sweeps.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;
pub mod train;

pub use ablate::{ablate, apply_overrides, AblationTable, SweepSpec, Variant};
pub use checkpoint::Checkpoint;
pub use config::{Ablation, EvalConfig, ModelConfig, OptimConfig, RunConfig};
pub use model::{ForwardOutput, Hooks, Primed, Sample};
pub use optim::{lr_at, AdamW};
pub use train::{
    evaluate, evaluate_checkpoint, load_samples, train, train_on, EpochLog, EvalFilter,
    TrainOutcome,
};
