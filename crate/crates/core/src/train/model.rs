//! The full fusion model: alignment, prompt generation, pair construction,
//! the shared encoder and the classifier.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::config::TrainConfig;
use crate::augment::{
    assemble, embed_text_batch, fixed_prompt, label_rows, mask_rows, EmbeddingTable, PromptMode,
    SequenceLayout,
};
use crate::data::{DatasetManifest, ModalityBundle};
use crate::encoder::{encode_augmented, encode_normal, mean_pool, Encoder, EncoderDims};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::losses::{interleave_pairs, nt_xent, total_loss};
use crate::prompt::{generate_prompt, PromptGenerator};
use crate::sbma::{run_sbma, Sbma, SbmaDims, SequenceInput};
use crate::substrate::{Graph, Initializer, Matrix, ParamStore, Real, RngSeed, Var};

#[derive(Debug)]
pub struct TclMap {
    pub config: TrainConfig,
    pub manifest: DatasetManifest,
    pub sbma: Sbma,
    pub prompt: PromptGenerator,
    pub embed: EmbeddingTable,
    pub encoder: Encoder,
    pub classifier: Linear,
    pub layout: SequenceLayout,
    label_words: Vec<Vec<u32>>,
    augmented_builds: AtomicUsize,
}

/// Graph nodes produced by one forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `B × I`.
    pub logits: Var,
    /// Refined `[MASK]` tokens, `B × d_t`.
    pub z_mask: Var,
    /// Refined label tokens, `B × d_t`, when the augmented branch ran.
    pub z_label: Option<Var>,
}

/// Loss nodes for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub contrastive: Option<Var>,
    pub classification: Var,
}

impl TclMap {
    /// Registers every parameter in `store` (in a fixed order) and returns
    /// the model. Parameters of disabled components are still created so
    /// that every configuration shares one checkpoint layout.
    pub fn new<T: Real>(
        config: &TrainConfig,
        manifest: &DatasetManifest,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        manifest.validate()?;
        if !store.is_empty() {
            return Err(Error::config("model parameters need an empty store"));
        }
        let mut init = Initializer::new(RngSeed(config.seed));
        let d = manifest.dims;
        let l = manifest.max_lens;
        let sbma = Sbma::new(
            store,
            &mut init,
            SbmaDims {
                token_width: d.text,
                video_width: d.video,
                audio_width: d.audio,
                video_len: l.video,
                audio_len: l.audio,
                prompt_len: config.prompt_len,
                hidden: config.hidden,
            },
            config.alpha_tv,
            config.alpha_ta,
        )?;
        let prompt = PromptGenerator::new(
            store,
            &mut init,
            config.hidden,
            config.map_heads,
            d.text,
            config.swap_roles,
        )?;
        let layout = SequenceLayout {
            text_len: l.text,
            prompt_len: config.map_on.then_some(config.prompt_len),
        };
        let max_seq = l.text + 2 + config.prompt_len;
        let embed = EmbeddingTable::new(store, &mut init, manifest.text_vocab_size, d.text, max_seq);
        let encoder = Encoder::new(
            store,
            &mut init,
            EncoderDims {
                width: d.text,
                layers: config.encoder_layers,
                heads: config.encoder_heads,
                gate_index: config.gate_index,
                gate_beta: config.gate_beta,
                nonverbal_width: config.hidden,
            },
        )?;
        let classifier = Linear::new(store, &mut init, "classifier", d.text, manifest.num_labels, true);
        if config.map_on {
            if let Some(phrase) = config.prompt_mode.phrase() {
                if config.prompt_len != phrase.len() {
                    return Err(Error::config(format!(
                        "prompt_mode {} needs prompt_len = {}",
                        config.prompt_mode.name(),
                        phrase.len()
                    )));
                }
                for w in phrase {
                    if manifest.token_id(w).is_none() {
                        return Err(Error::config(format!(
                            "prompt_mode {} needs the word {w:?} in the vocabulary",
                            config.prompt_mode.name()
                        )));
                    }
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            manifest: manifest.clone(),
            sbma,
            prompt,
            embed,
            encoder,
            classifier,
            layout,
            label_words: manifest.label_words(),
            augmented_builds: AtomicUsize::new(0),
        })
    }

    /// How many times the augmented sequence has been built.
    pub fn augmented_builds(&self) -> usize {
        self.augmented_builds.load(Ordering::Relaxed)
    }

    fn nonverbal_input<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[&ModalityBundle],
        video: bool,
    ) -> SequenceInput {
        let (max_len, width) = if video {
            (self.manifest.max_lens.video, self.manifest.dims.video)
        } else {
            (self.manifest.max_lens.audio, self.manifest.dims.audio)
        };
        let mut stacked = Matrix::<T>::zeros(batch.len() * max_len, width);
        if !self.config.text_only {
            let out = stacked.as_mut_slice();
            for (b, s) in batch.iter().enumerate() {
                let src = if video { &s.video } else { &s.audio };
                let dst = &mut out[b * max_len * width..(b + 1) * max_len * width];
                for (d, &x) in dst.iter_mut().zip(src.as_slice()) {
                    *d = T::from_f32_lossy(x);
                }
            }
        }
        let lens = batch
            .iter()
            .map(|s| if video { s.true_lens.video } else { s.true_lens.audio })
            .collect();
        SequenceInput {
            var: g.constant(stacked),
            max_len,
            lens,
        }
    }

    fn text_rows<T: Real>(&self, g: &mut Graph<'_, T>, batch: &[&ModalityBundle]) -> Result<Var> {
        let lt = self.manifest.max_lens.text;
        if self.manifest.text_embeddings {
            let width = self.manifest.dims.text;
            let mut stacked = Matrix::<T>::zeros(batch.len() * (lt + 1), width);
            for (b, s) in batch.iter().enumerate() {
                let emb = s.text_embeddings.as_ref().ok_or_else(|| {
                    Error::Dimension("sample is missing its precomputed text embeddings".into())
                })?;
                if emb.shape() != (lt + 1, width) {
                    return Err(Error::Dimension(format!(
                        "text embeddings are {:?}, expected {:?}",
                        emb.shape(),
                        (lt + 1, width)
                    )));
                }
                for r in 0..=lt {
                    for (d, &x) in stacked.row_mut(b * (lt + 1) + r).iter_mut().zip(emb.row(r)) {
                        *d = T::from_f32_lossy(x);
                    }
                }
            }
            Ok(g.constant(stacked))
        } else {
            let ids: Vec<&[u32]> = batch.iter().map(|s| s.text_ids.as_slice()).collect();
            embed_text_batch(g, &self.embed, &ids, lt)
        }
    }

    /// Runs the normal branch and, when `augmented`, the augmented branch.
    /// Labels are read only by the augmented branch.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[&ModalityBundle],
        augmented: bool,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Degenerate("empty batch".into()));
        }
        let cfg = &self.config;
        let video = self.nonverbal_input(g, batch, true);
        let audio = self.nonverbal_input(g, batch, false);
        let aligned = run_sbma(g, &self.sbma, &video, &audio, cfg.sbma_on && cfg.map_on)?;

        let prompt = if cfg.map_on {
            Some(match cfg.prompt_mode {
                PromptMode::ModalityAware => generate_prompt(g, &self.prompt, &aligned)?,
                mode => fixed_prompt(g, &self.embed, &self.manifest, mode, cfg.prompt_len, batch.len())?,
            })
        } else {
            None
        };

        let z_text = self.text_rows(g, batch)?;
        let text_lens: Vec<usize> = batch.iter().map(|s| s.true_lens.text).collect();
        let masks = mask_rows(g, &self.embed, batch.len())?;
        let normal = assemble(g, &self.embed, self.layout, z_text, &text_lens, prompt, masks)?;
        let encoded = encode_normal(g, &self.encoder, &normal, aligned.v_hat, aligned.a_hat, aligned.len)?;

        let mut pool_mask = normal.attention_mask.clone();
        if !cfg.pool_prompt {
            for b in 0..normal.batch {
                let row = &mut pool_mask[b * normal.len..(b + 1) * normal.len];
                if let Some(r) = &normal.prompt_range {
                    row[r.clone()].iter_mut().for_each(|m| *m = false);
                }
                row[normal.special_pos] = false;
            }
        }
        let pooled = mean_pool(g, encoded.tokens, &pool_mask, normal.batch, normal.len)?;
        let logits = self.classifier.forward(g, pooled)?;

        let z_label = if augmented {
            self.augmented_builds.fetch_add(1, Ordering::Relaxed);
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let rows = label_rows(g, &self.embed, &self.label_words, &labels)?;
            let aug = assemble(g, &self.embed, self.layout, z_text, &text_lens, prompt, rows)?;
            let out = encode_augmented(g, &self.encoder, &aug)?;
            Some(if cfg.stop_grad_label {
                g.detach(out.special)
            } else {
                out.special
            })
        } else {
            None
        };
        Ok(ForwardOutput {
            logits,
            z_mask: encoded.special,
            z_label,
        })
    }

    /// Classification loss plus, with `tcl_on`, the contrastive loss.
    pub fn loss<T: Real>(&self, g: &mut Graph<'_, T>, batch: &[&ModalityBundle]) -> Result<LossNodes> {
        let out = self.forward(g, batch, self.config.tcl_on)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let classification = g.cross_entropy(out.logits, &labels)?;
        let contrastive = match out.z_label {
            Some(z_label) => {
                let pairs = interleave_pairs(g, out.z_mask, z_label)?;
                Some(nt_xent(g, pairs, self.config.tau)?)
            }
            None => None,
        };
        let total = total_loss(g, contrastive, classification)?;
        Ok(LossNodes {
            total,
            contrastive,
            classification,
        })
    }

    /// Arg-max class per sample from the normal branch only.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, batch: &[&ModalityBundle]) -> Result<Vec<usize>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, batch, false)?;
        let logits = g.value(out.logits);
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SplitSizes, SynthConfig};
    use crate::substrate::grad_check;

    fn small_data() -> crate::data::Dataset {
        generate_synthetic(&SynthConfig {
            split_sizes: SplitSizes {
                train: 8,
                val: 4,
                test: 4,
            },
            ..Default::default()
        })
        .unwrap()
        .dataset
    }

    #[test]
    fn no_tcl_never_builds_the_augmented_sequence() {
        let ds = small_data();
        let cfg = TrainConfig {
            tcl_on: false,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new();
        let model = TclMap::new(&cfg, &ds.manifest, &mut store).unwrap();
        let batch: Vec<&ModalityBundle> = ds.train.iter().collect();
        let mut g = Graph::new(&store);
        let loss = model.loss(&mut g, &batch).unwrap();
        assert!(loss.contrastive.is_none());
        assert_eq!(model.augmented_builds(), 0);

        // Every configuration registers the same parameters, so the store
        // built above also serves a model with the contrastive term on.
        let model = TclMap::new(&TrainConfig::default(), &ds.manifest, &mut ParamStore::<f32>::new()).unwrap();
        let mut g = Graph::new(&store);
        model.loss(&mut g, &batch).unwrap();
        assert_eq!(model.augmented_builds(), 1);
    }

    #[test]
    fn predictions_ignore_labels() {
        let ds = small_data();
        let mut store = ParamStore::<f32>::new();
        let model = TclMap::new(&TrainConfig::default(), &ds.manifest, &mut store).unwrap();
        let batch: Vec<&ModalityBundle> = ds.test.iter().collect();
        let relabeled: Vec<ModalityBundle> = ds.test.iter().map(|b| ModalityBundle { label: 0, ..b.clone() }).collect();
        let relabeled: Vec<&ModalityBundle> = relabeled.iter().collect();
        assert_eq!(
            model.predict(&store, &batch).unwrap(),
            model.predict(&store, &relabeled).unwrap()
        );
    }

    #[test]
    fn branches_share_encoder_parameters() {
        let ds = small_data();
        let mut store = ParamStore::<f32>::new();
        let model = TclMap::new(&TrainConfig::default(), &ds.manifest, &mut store).unwrap();
        let batch: Vec<&ModalityBundle> = ds.train.iter().take(4).collect();
        let run = |store: &ParamStore<f32>| {
            let mut g = Graph::new(store);
            let out = model.forward(&mut g, &batch, true).unwrap();
            (g.value(out.z_mask).clone(), g.value(out.z_label.unwrap()).clone())
        };
        let (m0, l0) = run(&store);
        let w = model.encoder.blocks[1].ffn.second.weight;
        store.value_mut(w).as_mut_slice().iter_mut().for_each(|x| *x *= 1.5);
        let (m1, l1) = run(&store);
        assert_ne!(m0, m1);
        assert_ne!(l0, l1);
    }

    #[test]
    fn same_seed_same_initialization() {
        let ds = small_data();
        let build = |seed| {
            let mut s = ParamStore::<f32>::new();
            let cfg = TrainConfig {
                seed,
                ..Default::default()
            };
            TclMap::new(&cfg, &ds.manifest, &mut s).unwrap();
            s.iter().map(|p| p.value.clone()).collect::<Vec<_>>()
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }

    #[test]
    fn end_to_end_gradient() {
        let ds = small_data();
        let cfg = TrainConfig {
            tau: 0.5,
            ..Default::default()
        };
        let mut store = ParamStore::<f64>::new();
        let model = TclMap::new(&cfg, &ds.manifest, &mut store).unwrap();
        let batch: Vec<&ModalityBundle> = ds.train.iter().take(4).collect();
        let report = grad_check(&mut store, |g| Ok(model.loss(g, &batch)?.total), 1e-5, 40, RngSeed(5)).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn handcraft_mode_needs_three_slots() {
        let ds = small_data();
        let cfg = TrainConfig {
            prompt_mode: PromptMode::Handcraft1,
            prompt_len: 4,
            ..Default::default()
        };
        assert!(TclMap::new(&cfg, &ds.manifest, &mut ParamStore::<f32>::new()).is_err());
    }
}
