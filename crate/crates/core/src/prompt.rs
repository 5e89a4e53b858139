//! Modality-aware prompt generation: one cross-attention block whose queries
//! come from the standardized learnable tokens, keys from aligned video and
//! values from aligned audio.

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, Mlp};
use crate::sbma::AlignedTriple;
use crate::substrate::{AttentionSegment, Graph, Initializer, ParamStore, Real, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "width {width} is not divisible by {heads} attention heads"
            )));
        }
        let mut lin = |part: &str| Linear::new(store, init, &format!("{name}.{part}"), width, width, true);
        Ok(Self {
            query: lin("query"),
            key: lin("key"),
            value: lin("value"),
            output: lin("output"),
            heads,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PromptGenerator {
    pub attention: CrossAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
    /// Maps the block output from width `H` to the text width `d_t`.
    pub projection: Linear,
    /// Exchange the key and value sources (video becomes the value).
    pub swap_roles: bool,
}

impl PromptGenerator {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        hidden: usize,
        heads: usize,
        text_width: usize,
        swap_roles: bool,
    ) -> Result<Self> {
        Ok(Self {
            attention: CrossAttention::new(store, init, "map.attn", hidden, heads)?,
            norm1: LayerNorm::new(store, "map.norm1", hidden, LN_EPS),
            ffn: Mlp::new(store, init, "map.ffn", (hidden, 4 * hidden, hidden)),
            norm2: LayerNorm::new(store, "map.norm2", hidden, LN_EPS),
            projection: Linear::new(store, init, "map.project", hidden, text_width, true),
            swap_roles,
        })
    }
}

/// Multi-head attention of the shared query rows `t_hat` (`L × H`) over each
/// sample's key rows (from `keys`) and value rows (from `values`), both
/// stacked `(B·L) × H`. Returns the output-projected `(B·L) × H` stack.
pub fn cross_modal_attention<T: Real>(
    g: &mut Graph<'_, T>,
    params: &CrossAttention,
    t_hat: Var,
    keys: Var,
    values: Var,
    batch: usize,
) -> Result<Var> {
    let l = g.shape(t_hat).0;
    if g.shape(keys).0 != batch * l || g.shape(values).0 != batch * l {
        return Err(Error::Shape {
            op: "cross_modal_attention",
            left: g.shape(keys),
            right: (batch * l, g.shape(t_hat).1),
        });
    }
    let q = params.query.forward(g, t_hat)?;
    let k = params.key.forward(g, keys)?;
    let v = params.value.forward(g, values)?;
    let segments = (0..batch)
        .map(|b| AttentionSegment {
            query_start: 0,
            query_len: l,
            key_start: b * l,
            key_len: l,
            key_mask: None,
        })
        .collect();
    let heads = g.attention(q, k, v, params.heads, segments)?;
    params.output.forward(g, heads)
}

/// `y1 = LN(T̂ + Attn)`, `y2 = LN(y1 + FFN(y1))`, prompt `= y2 · W + b`.
/// Returns the stacked `(B·L) × d_t` prompt rows.
pub fn generate_prompt<T: Real>(
    g: &mut Graph<'_, T>,
    params: &PromptGenerator,
    aligned: &AlignedTriple,
) -> Result<Var> {
    let (keys, values) = if params.swap_roles {
        (aligned.a_hat, aligned.v_hat)
    } else {
        (aligned.v_hat, aligned.a_hat)
    };
    let attn = cross_modal_attention(g, &params.attention, aligned.t_hat, keys, values, aligned.batch)?;
    let tiled: Vec<usize> = (0..aligned.batch).flat_map(|_| 0..aligned.len).collect();
    let residual = g.gather_rows(aligned.t_hat, &tiled)?;
    let y1 = g.add(residual, attn)?;
    let y1 = params.norm1.forward(g, y1)?;
    let f = params.ffn.forward(g, y1)?;
    let y2 = g.add(y1, f)?;
    let y2 = params.norm2.forward(g, y2)?;
    params.projection.forward(g, y2)
}
