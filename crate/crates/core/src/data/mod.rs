//! Datasets: in-memory sample bundles, the synthetic planted-signal
//! generator and the on-disk feature archive.

mod archive;
mod synth;
mod types;

pub use archive::{
    read_feature_archive, validate_archive, write_feature_archive, ArchiveReport, PayloadKind,
    FORMAT_VERSION, MAGIC,
};
pub use synth::{generate_synthetic, SynthConfig, SyntheticDataset};
pub use types::{
    Dataset, DatasetManifest, ModalityBundle, ModalityDims, Split, SplitSizes, TrueLens,
    LABEL_WORD_BASE, MASK_ID, PAD_ID,
};
