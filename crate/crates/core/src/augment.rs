//! Token sequences for the two branches.
//!
//! Both sequences are `[CLS, text (padded to l_t), prompt (D rows), special]`.
//! The normal sequence ends with the `[MASK]` embedding and the augmented one
//! with the embedding of the true label's word(s); nothing else differs.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, MASK_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::substrate::{Graph, Initializer, Matrix, ParamId, ParamStore, Real, Var};

/// What fills the prompt slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptMode {
    /// Generated from video and audio.
    #[default]
    #[serde(rename = "modality_aware")]
    ModalityAware,
    /// Frozen embeddings of "i want to".
    #[serde(rename = "handcraft_1")]
    Handcraft1,
    /// Frozen embeddings of "i intend to".
    #[serde(rename = "handcraft_2")]
    Handcraft2,
    /// `D` frozen copies of the `[MASK]` embedding.
    #[serde(rename = "mask")]
    Mask,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [
        PromptMode::ModalityAware,
        PromptMode::Handcraft1,
        PromptMode::Handcraft2,
        PromptMode::Mask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptMode::ModalityAware => "modality_aware",
            PromptMode::Handcraft1 => "handcraft_1",
            PromptMode::Handcraft2 => "handcraft_2",
            PromptMode::Mask => "mask",
        }
    }

    /// The fixed phrase for handcrafted modes.
    pub fn phrase(self) -> Option<[&'static str; 3]> {
        match self {
            PromptMode::Handcraft1 => Some(["i", "want", "to"]),
            PromptMode::Handcraft2 => Some(["i", "intend", "to"]),
            _ => None,
        }
    }
}

/// Word table plus the learned `[CLS]` row and position embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub cls: ParamId,
    pub position: ParamId,
    pub vocab_size: usize,
    pub width: usize,
}

impl EmbeddingTable {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        vocab_size: usize,
        width: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            table: store.add("embed.table", init.normal(vocab_size, width, 1.0)),
            cls: store.add("embed.cls", init.normal(1, width, 1.0)),
            position: store.add("embed.position", init.normal(max_seq_len, width, 0.1)),
            vocab_size,
            width,
        }
    }
}

fn padded_ids(ids: &[u32], text_len: usize) -> Result<Vec<usize>> {
    if ids.len() > text_len {
        return Err(Error::Dimension(format!(
            "{} text tokens exceed the padded length {text_len}",
            ids.len()
        )));
    }
    let mut out: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    out.resize(text_len, PAD_ID as usize);
    Ok(out)
}

/// `[CLS; table[ids]]` padded with the pad row to `text_len + 1` rows.
pub fn embed_text<T: Real>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    ids: &[u32],
    text_len: usize,
) -> Result<Var> {
    embed_text_batch(g, table, &[ids], text_len)
}

/// Batched [`embed_text`]: `(B·(l_t + 1)) × d_t`.
pub fn embed_text_batch<T: Real>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    ids: &[&[u32]],
    text_len: usize,
) -> Result<Var> {
    let mut flat = Vec::with_capacity(ids.len() * text_len);
    for sample in ids {
        flat.extend(padded_ids(sample, text_len)?);
    }
    let t = g.param(table.table);
    let words = g.gather_rows(t, &flat)?;
    let cls = g.param(table.cls);
    let source = g.concat_rows(&[cls, words])?;
    let order: Vec<usize> = (0..ids.len())
        .flat_map(|b| std::iter::once(0).chain((0..text_len).map(move |i| 1 + b * text_len + i)))
        .collect();
    g.gather_rows(source, &order)
}

/// One row per label: the mean of its word rows in the table (`I × d_t`).
pub fn label_embeddings<T: Real>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    label_words: &[Vec<u32>],
) -> Result<Var> {
    let mut avg = Matrix::zeros(label_words.len(), table.vocab_size);
    for (y, words) in label_words.iter().enumerate() {
        if words.is_empty() {
            return Err(Error::config(format!("label {y} has no words")));
        }
        let w = T::one() / T::from_usize(words.len()).unwrap();
        for &id in words {
            if id as usize >= table.vocab_size {
                return Err(Error::Vocabulary {
                    id: id as usize,
                    vocab_size: table.vocab_size,
                });
            }
            let cur = avg.get(y, id as usize);
            avg.set(y, id as usize, cur + w);
        }
    }
    let avg = g.constant(avg);
    let t = g.param(table.table);
    g.matmul(avg, t)
}

/// Embedding of one label (`1 × d_t`).
pub fn embed_label<T: Real>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    label_words: &[Vec<u32>],
    label: usize,
) -> Result<Var> {
    let words = label_words.get(label).ok_or(Error::Label {
        label,
        num_labels: label_words.len(),
    })?;
    label_embeddings(g, table, std::slice::from_ref(words))
}

/// A stacked batch of equally long token sequences.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `(B·len) × d_t`, position embeddings included.
    pub embeddings: Var,
    pub batch: usize,
    pub len: usize,
    /// Index of the `[MASK]`/label slot inside each sequence (the last one).
    pub special_pos: usize,
    /// Prompt slots inside each sequence, if the prompt is present.
    pub prompt_range: Option<Range<usize>>,
    /// `B·len` flags; padded text positions are `false`.
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn sample_mask(&self, b: usize) -> &[bool] {
        &self.attention_mask[b * self.len..(b + 1) * self.len]
    }
}

/// Fixed geometry shared by every sequence of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub text_len: usize,
    /// `Some(D)` when prompt slots are present.
    pub prompt_len: Option<usize>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.text_len + 1 + self.prompt_len.unwrap_or(0) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn special_pos(&self) -> usize {
        self.len() - 1
    }
}

/// Concatenates `[Z_text, prompt, special]` per sample and adds positions.
///
/// `z_text` is `(B·(l_t+1)) × d_t`, `prompt` is `(B·D) × d_t` and `special`
/// is `B × d_t`. `text_lens` are the true text lengths (without `[CLS]`).
pub fn assemble<T: Real>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    layout: SequenceLayout,
    z_text: Var,
    text_lens: &[usize],
    prompt: Option<Var>,
    special: Var,
) -> Result<TokenSequence> {
    let batch = text_lens.len();
    let lt = layout.text_len;
    let d = layout.prompt_len.unwrap_or(0);
    let width = g.shape(z_text).1;
    let expect = |g: &Graph<'_, T>, v: Var, rows: usize| -> Result<()> {
        if g.shape(v) != (rows, width) {
            return Err(Error::Shape {
                op: "assemble",
                left: g.shape(v),
                right: (rows, width),
            });
        }
        Ok(())
    };
    expect(g, z_text, batch * (lt + 1))?;
    expect(g, special, batch)?;
    let mut parts = vec![z_text];
    match (prompt, layout.prompt_len) {
        (Some(p), Some(_)) => {
            expect(g, p, batch * d)?;
            parts.push(p);
        }
        (None, None) => {}
        _ => return Err(Error::config("prompt presence does not match the sequence layout")),
    }
    parts.push(special);
    let source = g.concat_rows(&parts)?;

    let prompt_base = batch * (lt + 1);
    let special_base = prompt_base + batch * d;
    let len = layout.len();
    let mut order = Vec::with_capacity(batch * len);
    let mut mask = Vec::with_capacity(batch * len);
    for (b, &tl) in text_lens.iter().enumerate() {
        if tl > lt {
            return Err(Error::Dimension(format!("text length {tl} exceeds {lt}")));
        }
        order.extend(b * (lt + 1)..(b + 1) * (lt + 1));
        mask.push(true);
        mask.extend((0..lt).map(|i| i < tl));
        order.extend(prompt_base + b * d..prompt_base + (b + 1) * d);
        mask.extend(std::iter::repeat_n(true, d));
        order.push(special_base + b);
        mask.push(true);
    }
    let rows = g.gather_rows(source, &order)?;
    let pos = g.param(table.position);
    if g.shape(pos).0 < len {
        return Err(Error::Dimension(format!(
            "{} position embeddings for sequences of length {len}",
            g.shape(pos).0
        )));
    }
    let tiled: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
    let pos = g.gather_rows(pos, &tiled)?;
    let embeddings = g.add(rows, pos)?;
    Ok(TokenSequence {
        embeddings,
        batch,
        len,
        special_pos: len - 1,
        prompt_range: layout.prompt_len.map(|d| lt + 1..lt + 1 + d),
        attention_mask: mask,
    })
}

/// `B × d_t` rows of the `[MASK]` embedding.
pub fn mask_rows<T: Real>(g: &mut Graph<'_, T>, table: &EmbeddingTable, batch: usize) -> Result<Var> {
    let t = g.param(table.table);
    g.gather_rows(t, &vec![MASK_ID as usize; batch])
}

/// `B × d_t` label embeddings for the given labels.
pub fn label_rows<T: Real>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    label_words: &[Vec<u32>],
    labels: &[usize],
) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= label_words.len()) {
        return Err(Error::Label {
            label: bad,
            num_labels: label_words.len(),
        });
    }
    let all = label_embeddings(g, table, label_words)?;
    g.gather_rows(all, labels)
}

/// Builds the normal sequence `Z_text ⊕ prompt ⊕ [MASK]` and the augmented
/// sequence `Z_text ⊕ prompt ⊕ z_label`.
#[allow(clippy::too_many_arguments)]
pub fn build_pair<T: Real>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    layout: SequenceLayout,
    z_text: Var,
    text_lens: &[usize],
    prompt: Option<Var>,
    label_words: &[Vec<u32>],
    labels: &[usize],
) -> Result<(TokenSequence, TokenSequence)> {
    let masks = mask_rows(g, table, text_lens.len())?;
    let normal = assemble(g, table, layout, z_text, text_lens, prompt, masks)?;
    let label = label_rows(g, table, label_words, labels)?;
    let augmented = assemble(g, table, layout, z_text, text_lens, prompt, label)?;
    Ok((normal, augmented))
}

/// Prompt rows that do not depend on the nonverbal input: `(B·D) × d_t`
/// detached table rows for the handcrafted and `[MASK]` modes.
pub fn fixed_prompt<T: Real>(
    g: &mut Graph<'_, T>,
    table: &EmbeddingTable,
    manifest: &DatasetManifest,
    mode: PromptMode,
    prompt_len: usize,
    batch: usize,
) -> Result<Var> {
    let ids: Vec<usize> = match mode {
        PromptMode::ModalityAware => {
            return Err(Error::config("modality-aware prompts are generated, not fixed"))
        }
        PromptMode::Mask => vec![MASK_ID as usize; prompt_len],
        PromptMode::Handcraft1 | PromptMode::Handcraft2 => {
            let phrase = mode.phrase().unwrap_or_default();
            if prompt_len != phrase.len() {
                return Err(Error::config(format!(
                    "{} needs prompt_len = {}, got {prompt_len}",
                    mode.name(),
                    phrase.len()
                )));
            }
            phrase
                .iter()
                .map(|w| {
                    manifest.token_id(w).map(|i| i as usize).ok_or_else(|| {
                        Error::config(format!("word {w:?} is not in the dataset vocabulary"))
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let t = g.param(table.table);
    let rows = g.gather_rows(t, &ids)?;
    let rows = g.detach(rows);
    let tiled: Vec<usize> = (0..batch).flat_map(|_| 0..prompt_len).collect();
    g.gather_rows(rows, &tiled)
}
