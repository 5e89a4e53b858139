//! Model composition, optimization, metrics, checkpoints and experiment
//! drivers.

mod checkpoint;
mod config;
mod experiments;
mod metrics;
mod model;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_FILE, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, SUMMARY_FILE};
pub use config::{apply_override, DataSource, ExperimentConfig, TrainConfig};
pub use experiments::{
    ablate, compare_prompts, read_summary_csv, run_seeds, summarize, write_summary_csv, Setting,
    SummaryRow, ABLATION_FILE, PROMPT_COMPARISON_FILE,
};
pub use metrics::{compute_metrics, confusion_matrix, MetricsReport};
pub use model::{ForwardOutput, LossNodes, TclMap};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{
    evaluate, predict, predict_with, read_history, train, write_history, EpochRecord, TrainOutcome,
    HISTORY_FILE,
};
