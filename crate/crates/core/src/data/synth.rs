//! Planted-signal synthetic datasets.
//!
//! Each label owns a word in the text vocabulary. Video and audio frames
//! carry a motif (a fixed random unit direction) plus Gaussian noise. In
//! synergy mode the label is `(video motif + audio motif) mod I`, so either
//! nonverbal modality alone is independent of the label.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::types::{
    Dataset, DatasetManifest, ModalityBundle, ModalityDims, SplitSizes, TrueLens, LABEL_WORD_BASE,
};
use super::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::substrate::{Matrix, RngSeed};

/// Words reserved after the label words, used by handcrafted prompts.
pub const PHRASE_WORDS: [&str; 4] = ["i", "want", "to", "intend"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_labels: usize,
    pub split_sizes: SplitSizes,
    /// Probability that the text contains the label word.
    pub rho_text: f64,
    /// Probability that the video motif carries its planted value.
    pub rho_video: f64,
    pub rho_audio: f64,
    pub synergy: bool,
    pub noise_std: f64,
    pub seed: u64,
    pub text_vocab_size: usize,
    pub dims: ModalityDims,
    pub max_lens: ModalityDims,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_labels: 4,
            split_sizes: SplitSizes {
                train: 1024,
                val: 256,
                test: 256,
            },
            rho_text: 0.3,
            rho_video: 1.0,
            rho_audio: 1.0,
            synergy: true,
            noise_std: 0.1,
            seed: 0,
            text_vocab_size: 64,
            dims: ModalityDims {
                text: 32,
                video: 16,
                audio: 16,
            },
            max_lens: ModalityDims {
                text: 12,
                video: 10,
                audio: 14,
            },
        }
    }
}

impl SynthConfig {
    fn first_distractor(&self) -> usize {
        LABEL_WORD_BASE as usize + self.num_labels + PHRASE_WORDS.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rho) in [
            ("rho_text", self.rho_text),
            ("rho_video", self.rho_video),
            ("rho_audio", self.rho_audio),
        ] {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::config(format!("{name} = {rho} outside [0, 1]")));
            }
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::config(format!("noise_std = {} must be >= 0", self.noise_std)));
        }
        if self.num_labels < 2 {
            return Err(Error::config("need at least 2 labels"));
        }
        if self.first_distractor() >= self.text_vocab_size {
            return Err(Error::config(format!(
                "{} labels do not fit a vocabulary of {} tokens (needs at least {})",
                self.num_labels,
                self.text_vocab_size,
                self.first_distractor() + 1
            )));
        }
        let d = self.dims;
        let l = self.max_lens;
        if [d.text, d.video, d.audio, l.text, l.video, l.audio].contains(&0) {
            return Err(Error::config("all dims and max lengths must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// `I × d_v` unit motif directions.
    pub video_motifs: Matrix<f32>,
    /// `I × d_a` unit motif directions.
    pub audio_motifs: Matrix<f32>,
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f32> {
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut m = Matrix::from_fn(rows, cols, |_, _| normal.sample(rng) as f32);
    for r in 0..rows {
        let n = m.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
        m.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn draw_len(rng: &mut ChaCha8Rng, max: usize) -> usize {
    rng.random_range(max.div_ceil(2)..=max)
}

fn motif_sequence(
    rng: &mut ChaCha8Rng,
    motifs: &Matrix<f32>,
    motif: usize,
    max_len: usize,
    noise: &Normal<f64>,
) -> (Matrix<f32>, usize) {
    let len = draw_len(rng, max_len);
    let mut m = Matrix::zeros(max_len, motifs.cols());
    for r in 0..len {
        for (c, v) in m.row_mut(r).iter_mut().enumerate() {
            *v = motifs.get(motif, c) + noise.sample(rng) as f32;
        }
    }
    (m, len)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = RngSeed(cfg.seed).stream(11);
    let labels = cfg.num_labels;
    let video_motifs = unit_rows(&mut rng, labels, cfg.dims.video);
    let audio_motifs = unit_rows(&mut rng, labels, cfg.dims.audio);
    let noise = Normal::new(0.0, cfg.noise_std).unwrap();
    let distractors = cfg.first_distractor()..cfg.text_vocab_size;

    let mut vocab = vec!["[PAD]".to_string(), "[MASK]".to_string()];
    vocab.extend((0..labels).map(|y| format!("label_{y}")));
    vocab.extend(PHRASE_WORDS.iter().map(|w| w.to_string()));
    vocab.extend(distractors.clone().map(|i| format!("w{i}")));

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.to_string(),
        split_sizes: cfg.split_sizes,
        num_labels: labels,
        label_names: (0..labels).map(|y| format!("label_{y}")).collect(),
        text_vocab_size: cfg.text_vocab_size,
        dims: cfg.dims,
        max_lens: cfg.max_lens,
        vocab,
        label_token_ids: Vec::new(),
        text_embeddings: false,
    };

    let mut make_split = |n: usize| -> Vec<ModalityBundle> {
        let mut ys: Vec<usize> = (0..n).map(|i| i % labels).collect();
        ys.shuffle(&mut rng);
        ys.into_iter()
            .map(|label| {
                let text_len = draw_len(&mut rng, cfg.max_lens.text);
                let mut text_ids: Vec<u32> = (0..text_len)
                    .map(|_| rng.random_range(distractors.clone()) as u32)
                    .collect();
                if rng.random_bool(cfg.rho_text) {
                    let pos = rng.random_range(0..text_len);
                    text_ids[pos] = LABEL_WORD_BASE + label as u32;
                }

                let (mut video_motif, mut audio_motif) = if cfg.synergy {
                    let v = rng.random_range(0..labels);
                    (v, (label + labels - v) % labels)
                } else {
                    (label, label)
                };
                if !rng.random_bool(cfg.rho_video) {
                    video_motif = rng.random_range(0..labels);
                }
                if !rng.random_bool(cfg.rho_audio) {
                    audio_motif = rng.random_range(0..labels);
                }

                let (video, video_len) =
                    motif_sequence(&mut rng, &video_motifs, video_motif, cfg.max_lens.video, &noise);
                let (audio, audio_len) =
                    motif_sequence(&mut rng, &audio_motifs, audio_motif, cfg.max_lens.audio, &noise);
                ModalityBundle {
                    text_ids,
                    video,
                    audio,
                    true_lens: TrueLens {
                        text: text_len,
                        video: video_len,
                        audio: audio_len,
                    },
                    label,
                    text_embeddings: None,
                }
            })
            .collect()
    };

    let train = make_split(cfg.split_sizes.train);
    let val = make_split(cfg.split_sizes.val);
    let test = make_split(cfg.split_sizes.test);
    let dataset = Dataset {
        manifest,
        train,
        val,
        test,
    };
    dataset.validate()?;
    Ok(SyntheticDataset {
        dataset,
        video_motifs,
        audio_motifs,
    })
}
