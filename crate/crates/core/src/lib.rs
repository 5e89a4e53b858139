//! Multimodal intent classification with nonverbal-aware prompts and a
//! token-level contrastive objective, on a small self-contained autodiff
//! core.
//!
//! The pipeline: [`sbma`] brings video and audio to a common length and
//! aligns them to the text, [`prompt`] turns the aligned features into
//! prompt tokens, [`augment`] builds the normal and label-augmented
//! sequences, [`encoder`] refines both with shared weights and
//! [`losses`] scores them. [`train`] ties it together.

// index loops mirror the textbook formulas in the numeric kernels
#![allow(clippy::needless_range_loop)]

pub mod augment;
pub mod data;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod losses;
pub mod prompt;
pub mod sbma;
pub mod substrate;
pub mod train;

pub use augment::PromptMode;
pub use data::{
    generate_synthetic, read_feature_archive, validate_archive, write_feature_archive, ArchiveReport,
    Dataset, DatasetManifest, ModalityBundle, Split, SynthConfig,
};
pub use error::{Error, Result};
pub use losses::LossReport;
pub use train::{
    ablate, compare_prompts, evaluate, train, Checkpoint, DataSource, EpochRecord, ExperimentConfig,
    MetricsReport, Setting, SummaryRow, TrainConfig, TrainOutcome,
};
