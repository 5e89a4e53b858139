//! Similarity-based modality alignment.
//!
//! Learnable tokens, video frames and audio frames are each brought to a
//! common `L × H` shape (soft length normalization followed by an MLP).
//! Video and audio are then re-weighted by their softmaxed similarity to
//! the standardized tokens.

use crate::error::{Error, Result};
use crate::layers::Mlp;
use crate::substrate::{Graph, Initializer, Matrix, ParamId, ParamStore, Real, Var};

/// Guard against dividing by the row norm of an all-zero matrix.
pub const NORM_FLOOR: f64 = 1e-8;

/// A batch of padded sequences stacked into one `(B·max_len) × d` matrix.
#[derive(Clone, Debug)]
pub struct SequenceInput {
    pub var: Var,
    pub max_len: usize,
    pub lens: Vec<usize>,
}

impl SequenceInput {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// Soft alignment from a variable-length sequence to `target_len` rows.
///
/// Source row `i` gets the logit vector `x_i · W + P_i` over the target
/// rows; each target row then takes a softmax over the valid source rows.
#[derive(Clone, Debug)]
pub struct LengthNormalizer {
    pub weight: ParamId,
    pub position: ParamId,
    pub max_len: usize,
    pub target_len: usize,
}

impl LengthNormalizer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        width: usize,
        max_len: usize,
        target_len: usize,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init.linear(width, target_len)),
            position: store.add(format!("{name}.position"), Matrix::zeros(max_len, target_len)),
            max_len,
            target_len,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, input: &SequenceInput) -> Result<Var> {
        let l = input.max_len;
        if l != self.max_len {
            return Err(Error::Dimension(format!(
                "sequence padded to {l} rows, normalizer expects {}",
                self.max_len
            )));
        }
        for &len in &input.lens {
            if len == 0 {
                return Err(Error::EmptySequence("length normalization input".into()));
            }
            if len > l {
                return Err(Error::Dimension(format!("true length {len} exceeds {l}")));
            }
        }
        let w = g.param(self.weight);
        let logits = g.matmul(input.var, w)?;
        let p = g.param(self.position);
        let tiled: Vec<usize> = (0..input.batch()).flat_map(|_| 0..l).collect();
        let p = g.gather_rows(p, &tiled)?;
        let logits = g.add(logits, p)?;

        let mut outs = Vec::with_capacity(input.batch());
        for (b, &len) in input.lens.iter().enumerate() {
            let lb = g.slice_rows(logits, b * l, l)?;
            let lb = g.transpose(lb);
            let mask: Vec<bool> = (0..self.target_len)
                .flat_map(|_| (0..l).map(move |j| j < len))
                .collect();
            let weights = g.softmax_rows_masked(lb, Some(&mask));
            let xb = g.slice_rows(input.var, b * l, l)?;
            outs.push(g.matmul(weights, xb)?);
        }
        g.concat_rows(&outs)
    }
}

/// Length-normalizes a single `l × d` sequence whose first `true_len` rows
/// are valid.
pub fn length_normalize<T: Real>(
    g: &mut Graph<'_, T>,
    seq: Var,
    true_len: usize,
    normalizer: &LengthNormalizer,
) -> Result<Var> {
    let max_len = g.shape(seq).0;
    normalizer.forward(
        g,
        &SequenceInput {
            var: seq,
            max_len,
            lens: vec![true_len],
        },
    )
}

/// The `D × d_p` learnable tokens that stand in for the text side during
/// alignment.
#[derive(Clone, Debug)]
pub struct LearnablePrompt {
    pub tokens: ParamId,
}

#[derive(Clone, Debug)]
pub struct StandardizePath {
    pub normalizer: LengthNormalizer,
    pub projection: Mlp,
}

impl StandardizePath {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        width: usize,
        max_len: usize,
        target_len: usize,
        hidden: usize,
    ) -> Self {
        Self {
            normalizer: LengthNormalizer::new(
                store,
                init,
                &format!("{name}.length"),
                width,
                max_len,
                target_len,
            ),
            projection: Mlp::new(store, init, &format!("{name}.mlp"), (width, hidden, hidden)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, input: &SequenceInput) -> Result<Var> {
        let x = self.normalizer.forward(g, input)?;
        self.projection.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct Standardizer {
    pub token: StandardizePath,
    pub video: StandardizePath,
    pub audio: StandardizePath,
}

/// Shapes the alignment stage is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SbmaDims {
    /// Width of the learnable tokens.
    pub token_width: usize,
    pub video_width: usize,
    pub audio_width: usize,
    pub video_len: usize,
    pub audio_len: usize,
    /// Number of learnable tokens `D`, which is also the common length `L`.
    pub prompt_len: usize,
    pub hidden: usize,
}

/// Standardizes the three paths to `L × H`. The token path has batch size
/// one; video and audio are stacked `(B·L) × H`.
pub fn standardize<T: Real>(
    g: &mut Graph<'_, T>,
    standardizer: &Standardizer,
    tokens: Var,
    video: &SequenceInput,
    audio: &SequenceInput,
) -> Result<(Var, Var, Var)> {
    let d = g.shape(tokens).0;
    let token_input = SequenceInput {
        var: tokens,
        max_len: d,
        lens: vec![d],
    };
    let t = standardizer.token.forward(g, &token_input)?;
    let v = standardizer.video.forward(g, video)?;
    let a = standardizer.audio.forward(g, audio)?;
    Ok((t, v, a))
}

/// `α · (T / max_i ‖T_i‖) · (X / max_i ‖X_i‖)ᵀ`.
pub fn similarity_matrix<T: Real>(g: &mut Graph<'_, T>, t: Var, x: Var, alpha: f64) -> Result<Var> {
    if g.shape(t).1 != g.shape(x).1 {
        return Err(Error::Shape {
            op: "similarity_matrix",
            left: g.shape(t),
            right: g.shape(x),
        });
    }
    let eps = T::from_f64_lossy(NORM_FLOOR);
    let ts = g.max_row_norm_scale(t, eps);
    let xs = g.max_row_norm_scale(x, eps);
    let m = g.matmul_bt(ts, xs)?;
    Ok(g.scale(m, T::from_f64_lossy(alpha)))
}

/// `MLP(softmax_rows(M) · X)`; `None` skips the MLP.
pub fn align<T: Real>(g: &mut Graph<'_, T>, m: Var, x: Var, projection: Option<&Mlp>) -> Result<Var> {
    let w = g.softmax_rows(m);
    let mixed = g.matmul(w, x)?;
    match projection {
        Some(mlp) => mlp.forward(g, mixed),
        None => Ok(mixed),
    }
}

/// Standardized and aligned features. `t` and `t_hat` are one `L × H`
/// matrix shared by the batch; the others are stacked `(B·L) × H`.
#[derive(Clone, Copy, Debug)]
pub struct AlignedTriple {
    pub t: Var,
    pub v: Var,
    pub a: Var,
    pub t_hat: Var,
    pub v_hat: Var,
    pub a_hat: Var,
    pub batch: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct Sbma {
    pub prompt: LearnablePrompt,
    pub standardizer: Standardizer,
    pub align_video: Mlp,
    pub align_audio: Mlp,
    pub alpha_tv: f64,
    pub alpha_ta: f64,
    pub dims: SbmaDims,
}

impl Sbma {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        dims: SbmaDims,
        alpha_tv: f64,
        alpha_ta: f64,
    ) -> Result<Self> {
        for (name, alpha) in [("alpha_tv", alpha_tv), ("alpha_ta", alpha_ta)] {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {alpha}")));
            }
        }
        if dims.prompt_len == 0 || dims.hidden == 0 {
            return Err(Error::config("prompt length and hidden width must be at least 1"));
        }
        let (l, h) = (dims.prompt_len, dims.hidden);
        let tokens = store.add("sbma.prompt_tokens", init.normal(l, dims.token_width, 1.0));
        let standardizer = Standardizer {
            token: StandardizePath::new(store, init, "sbma.token", dims.token_width, l, l, h),
            video: StandardizePath::new(store, init, "sbma.video", dims.video_width, dims.video_len, l, h),
            audio: StandardizePath::new(store, init, "sbma.audio", dims.audio_width, dims.audio_len, l, h),
        };
        Ok(Self {
            prompt: LearnablePrompt { tokens },
            standardizer,
            align_video: Mlp::new(store, init, "sbma.align_video", (h, h, h)),
            align_audio: Mlp::new(store, init, "sbma.align_audio", (h, h, h)),
            alpha_tv,
            alpha_ta,
            dims,
        })
    }
}

/// Runs standardization and, when `similarity_on`, the similarity-weighted
/// alignment. With it off the aligned features are the standardized ones.
pub fn run_sbma<T: Real>(
    g: &mut Graph<'_, T>,
    sbma: &Sbma,
    video: &SequenceInput,
    audio: &SequenceInput,
    similarity_on: bool,
) -> Result<AlignedTriple> {
    if video.batch() != audio.batch() {
        return Err(Error::Dimension(format!(
            "{} video sequences but {} audio sequences",
            video.batch(),
            audio.batch()
        )));
    }
    let tokens = g.param(sbma.prompt.tokens);
    let (t, v, a) = standardize(g, &sbma.standardizer, tokens, video, audio)?;
    let l = sbma.dims.prompt_len;
    let batch = video.batch();
    let (v_hat, a_hat) = if similarity_on {
        let mut vs = Vec::with_capacity(batch);
        let mut as_ = Vec::with_capacity(batch);
        for b in 0..batch {
            let vb = g.slice_rows(v, b * l, l)?;
            let ab = g.slice_rows(a, b * l, l)?;
            let m_tv = similarity_matrix(g, t, vb, sbma.alpha_tv)?;
            let m_ta = similarity_matrix(g, t, ab, sbma.alpha_ta)?;
            vs.push(align(g, m_tv, vb, None)?);
            as_.push(align(g, m_ta, ab, None)?);
        }
        // the MLPs are row-wise, so they run once over the whole stack
        let vs = g.concat_rows(&vs)?;
        let as_ = g.concat_rows(&as_)?;
        (
            sbma.align_video.forward(g, vs)?,
            sbma.align_audio.forward(g, as_)?,
        )
    } else {
        (v, a)
    };
    Ok(AlignedTriple {
        t,
        v,
        a,
        t_hat: t,
        v_hat,
        a_hat,
        batch,
        len: l,
    })
}
