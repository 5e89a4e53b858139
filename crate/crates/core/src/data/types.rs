use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::Matrix;

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
/// Label `y` is spelled by token id `LABEL_WORD_BASE + y` unless the
/// manifest provides explicit label token ids.
pub const LABEL_WORD_BASE: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub text: usize,
    pub video: usize,
    pub audio: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: String,
    pub split_sizes: SplitSizes,
    pub num_labels: usize,
    pub label_names: Vec<String>,
    pub text_vocab_size: usize,
    /// Embedding widths `(d_t, d_v, d_a)`.
    pub dims: ModalityDims,
    /// Padded lengths `(l_t, l_v, l_a)`.
    pub max_lens: ModalityDims,
    /// Token strings by id, when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocab: Vec<String>,
    /// Word ids spelling each label; empty means `LABEL_WORD_BASE + label`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_token_ids: Vec<Vec<u32>>,
    /// Samples carry precomputed `(l_t + 1) × d_t` text embeddings.
    #[serde(default)]
    pub text_embeddings: bool,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::config(format!("need at least 2 labels, got {}", self.num_labels)));
        }
        if self.label_names.len() != self.num_labels {
            return Err(Error::config(format!(
                "{} label names for {} labels",
                self.label_names.len(),
                self.num_labels
            )));
        }
        let d = self.dims;
        let l = self.max_lens;
        if [d.text, d.video, d.audio, l.text, l.video, l.audio].contains(&0) {
            return Err(Error::config("all dims and max lengths must be at least 1"));
        }
        if !self.vocab.is_empty() && self.vocab.len() != self.text_vocab_size {
            return Err(Error::config("vocab listing does not match text_vocab_size"));
        }
        let words = self.label_words();
        for ids in &words {
            if ids.is_empty() {
                return Err(Error::config("label spelled by zero tokens"));
            }
            if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.text_vocab_size) {
                return Err(Error::Vocabulary {
                    id: id as usize,
                    vocab_size: self.text_vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Token ids spelling each label.
    pub fn label_words(&self) -> Vec<Vec<u32>> {
        if self.label_token_ids.is_empty() {
            (0..self.num_labels as u32)
                .map(|y| vec![LABEL_WORD_BASE + y])
                .collect()
        } else {
            self.label_token_ids.clone()
        }
    }

    pub fn token_id(&self, word: &str) -> Option<u32> {
        self.vocab.iter().position(|w| w == word).map(|i| i as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrueLens {
    pub text: usize,
    pub video: usize,
    pub audio: usize,
}

/// One sample across all three modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBundle {
    /// Unpadded token ids; `text_ids.len() == true_lens.text`.
    pub text_ids: Vec<u32>,
    /// `l_v × d_v`, rows past `true_lens.video` are zero padding.
    pub video: Matrix<f32>,
    /// `l_a × d_a`, rows past `true_lens.audio` are zero padding.
    pub audio: Matrix<f32>,
    pub true_lens: TrueLens,
    pub label: usize,
    /// Optional `(l_t + 1) × d_t` precomputed text embeddings (CLS first).
    pub text_embeddings: Option<Matrix<f32>>,
}

impl ModalityBundle {
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let l = manifest.max_lens;
        let d = manifest.dims;
        let lens = self.true_lens;
        if lens.text != self.text_ids.len() || lens.text > l.text {
            return Err(Error::Dimension(format!(
                "text length {} (ids {}) exceeds max {}",
                lens.text,
                self.text_ids.len(),
                l.text
            )));
        }
        if lens.video > l.video || lens.audio > l.audio {
            return Err(Error::Dimension(format!(
                "true lengths {lens:?} exceed max lengths {l:?}"
            )));
        }
        if self.video.shape() != (l.video, d.video) {
            return Err(Error::Dimension(format!(
                "video features {:?}, manifest expects {:?}",
                self.video.shape(),
                (l.video, d.video)
            )));
        }
        if self.audio.shape() != (l.audio, d.audio) {
            return Err(Error::Dimension(format!(
                "audio features {:?}, manifest expects {:?}",
                self.audio.shape(),
                (l.audio, d.audio)
            )));
        }
        match (&self.text_embeddings, manifest.text_embeddings) {
            (Some(e), true) if e.shape() != (l.text + 1, d.text) => {
                return Err(Error::Dimension(format!(
                    "text embeddings {:?}, manifest expects {:?}",
                    e.shape(),
                    (l.text + 1, d.text)
                )));
            }
            (Some(_), false) | (None, true) => {
                return Err(Error::Dimension(
                    "text embedding presence disagrees with manifest".into(),
                ));
            }
            _ => {}
        }
        if self.label >= manifest.num_labels {
            return Err(Error::Label {
                label: self.label,
                num_labels: manifest.num_labels,
            });
        }
        if let Some(&id) = self.text_ids.iter().find(|&&id| id as usize >= manifest.text_vocab_size) {
            return Err(Error::Vocabulary {
                id: id as usize,
                vocab_size: manifest.text_vocab_size,
            });
        }
        if !self.video.is_finite() || !self.audio.is_finite() {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<ModalityBundle>,
    pub val: Vec<ModalityBundle>,
    pub test: Vec<ModalityBundle>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ModalityBundle] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<ModalityBundle> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let sizes = self.manifest.split_sizes;
        for (split, expected) in [
            (Split::Train, sizes.train),
            (Split::Val, sizes.val),
            (Split::Test, sizes.test),
        ] {
            if self.split(split).len() != expected {
                return Err(Error::Dimension(format!(
                    "{} split has {} samples, manifest says {}",
                    split.name(),
                    self.split(split).len(),
                    expected
                )));
            }
            for b in self.split(split) {
                b.validate(&self.manifest)?;
            }
        }
        Ok(())
    }

    /// Copy with every video and audio feature set to zero.
    pub fn without_nonverbal(&self) -> Dataset {
        let mut out = self.clone();
        for split in Split::ALL {
            for b in out.split_mut(split) {
                b.video.fill_zero();
                b.audio.fill_zero();
            }
        }
        out
    }
}
