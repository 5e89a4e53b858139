//! Shared transformer encoder for both branches.
//!
//! The normal branch applies an adaptation gate after block `gate_index`;
//! it shifts every token by a projection of the pooled nonverbal features,
//! with the shift norm capped at `β·‖h‖`, and then normalizes. The
//! augmented branch runs the same blocks and the same normalization with
//! no shift.

use crate::augment::TokenSequence;
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, Mlp};
use crate::prompt::LN_EPS;
use crate::substrate::{AttentionSegment, Graph, Initializer, Matrix, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderDims {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub gate_index: usize,
    pub gate_beta: f64,
    /// Width of one aligned nonverbal row (`H`).
    pub nonverbal_width: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
    pub heads: usize,
}

impl EncoderBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        let mut lin = |part: &str| Linear::new(store, init, &format!("{name}.{part}"), width, width, true);
        let (query, key, value, output) = (lin("query"), lin("key"), lin("value"), lin("output"));
        Self {
            query,
            key,
            value,
            output,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width, LN_EPS),
            ffn: Mlp::new(store, init, &format!("{name}.ffn"), (width, 4 * width, width)),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width, LN_EPS),
            heads,
        }
    }

    /// Post-norm block: masked self-attention and a GELU feed-forward, each
    /// with a residual connection.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, seq: &TokenSequence) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let segments = (0..seq.batch)
            .map(|b| AttentionSegment {
                query_start: b * seq.len,
                query_len: seq.len,
                key_start: b * seq.len,
                key_len: seq.len,
                key_mask: Some(seq.sample_mask(b).to_vec()),
            })
            .collect();
        let attn = g.attention(q, k, v, self.heads, segments)?;
        let attn = self.output.forward(g, attn)?;
        let y = g.add(x, attn)?;
        let y = self.norm1.forward(g, y)?;
        let f = self.ffn.forward(g, y)?;
        let y2 = g.add(y, f)?;
        self.norm2.forward(g, y2)
    }
}

#[derive(Clone, Debug)]
pub struct AdaptationGate {
    /// `2H → d_t`, no bias.
    pub fusion: Linear,
    pub beta: f64,
    pub norm: LayerNorm,
}

/// Concatenated row means of each sample's aligned video and audio rows:
/// `B × 2H`.
pub fn pool_nonverbal<T: Real>(
    g: &mut Graph<'_, T>,
    v_hat: Var,
    a_hat: Var,
    batch: usize,
    len: usize,
) -> Result<Var> {
    let pool = g.constant(pooling_matrix(&vec![true; batch * len], batch, len)?);
    let v = g.matmul(pool, v_hat)?;
    let a = g.matmul(pool, a_hat)?;
    g.concat_cols(&[v, a])
}

/// The bounded shift `s·d` for every token row, where sample `b` owns rows
/// `b·rows_per_sample ..`.
pub fn gate_shift<T: Real>(
    g: &mut Graph<'_, T>,
    gate: &AdaptationGate,
    h: Var,
    pooled: Var,
    rows_per_sample: usize,
) -> Result<Var> {
    let batch = g.shape(pooled).0;
    if g.shape(h).0 != batch * rows_per_sample {
        return Err(Error::Shape {
            op: "adaptation_gate",
            left: g.shape(h),
            right: (batch * rows_per_sample, g.shape(h).1),
        });
    }
    let d = gate.fusion.forward(g, pooled)?;
    let expand: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, rows_per_sample)).collect();
    let d = g.gather_rows(d, &expand)?;
    let h_norm = g.row_norms(h);
    let d_norm = g.row_norms(d);
    let d_norm = g.add_scalar(d_norm, T::from_f64_lossy(1e-8));
    let inv = g.recip(d_norm);
    let ratio = g.mul(h_norm, inv)?;
    let ratio = g.scale(ratio, T::from_f64_lossy(gate.beta));
    let s = g.min_const(ratio, T::one());
    g.mul_col(d, s)
}

/// `LayerNorm(h + s·d)` with `d = W_m · pooled` and
/// `s = min(β‖h‖ / (‖d‖ + 1e-8), 1)` per token.
pub fn adaptation_gate<T: Real>(
    g: &mut Graph<'_, T>,
    gate: &AdaptationGate,
    h: Var,
    pooled: Var,
    rows_per_sample: usize,
) -> Result<Var> {
    let shift = gate_shift(g, gate, h, pooled, rows_per_sample)?;
    let shifted = g.add(h, shift)?;
    gate.norm.forward(g, shifted)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub input_norm: LayerNorm,
    pub blocks: Vec<EncoderBlock>,
    pub gate: AdaptationGate,
    pub gate_index: usize,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Initializer, dims: EncoderDims) -> Result<Self> {
        if dims.layers == 0 || dims.gate_index >= dims.layers {
            return Err(Error::config(format!(
                "gate index {} must be below the layer count {}",
                dims.gate_index, dims.layers
            )));
        }
        if dims.heads == 0 || !dims.width.is_multiple_of(dims.heads) {
            return Err(Error::config(format!(
                "text width {} is not divisible by {} encoder heads",
                dims.width, dims.heads
            )));
        }
        if !(dims.gate_beta > 0.0 && dims.gate_beta.is_finite()) {
            return Err(Error::config(format!("gate beta must be positive, got {}", dims.gate_beta)));
        }
        let input_norm = LayerNorm::new(store, "encoder.input_norm", dims.width, LN_EPS);
        let blocks = (0..dims.layers)
            .map(|i| EncoderBlock::new(store, init, &format!("encoder.block{i}"), dims.width, dims.heads))
            .collect();
        let gate = AdaptationGate {
            fusion: Linear::new(store, init, "encoder.gate.fusion", 2 * dims.nonverbal_width, dims.width, false),
            beta: dims.gate_beta,
            norm: LayerNorm::new(store, "encoder.gate.norm", dims.width, LN_EPS),
        };
        Ok(Self {
            input_norm,
            blocks,
            gate,
            gate_index: dims.gate_index,
        })
    }

    fn run<T: Real>(&self, g: &mut Graph<'_, T>, seq: &TokenSequence, pooled: Option<Var>) -> Result<Encoded> {
        let mut x = self.input_norm.forward(g, seq.embeddings)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x, seq)?;
            if i == self.gate_index {
                x = match pooled {
                    Some(p) => adaptation_gate(g, &self.gate, x, p, seq.len)?,
                    None => self.gate.norm.forward(g, x)?,
                };
            }
        }
        let rows: Vec<usize> = (0..seq.batch).map(|b| b * seq.len + seq.special_pos).collect();
        let special = g.gather_rows(x, &rows)?;
        Ok(Encoded { tokens: x, special })
    }
}

/// Encoder output: every refined token (stacked like the input) and the
/// refined special token of each sample (`B × d_t`).
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub tokens: Var,
    pub special: Var,
}

/// Normal branch: the blocks with the adaptation gate fed by the aligned
/// nonverbal features (`(B·len) × H` stacks).
pub fn encode_normal<T: Real>(
    g: &mut Graph<'_, T>,
    encoder: &Encoder,
    seq: &TokenSequence,
    v_hat: Var,
    a_hat: Var,
    nonverbal_len: usize,
) -> Result<Encoded> {
    let pooled = pool_nonverbal(g, v_hat, a_hat, seq.batch, nonverbal_len)?;
    encoder.run(g, seq, Some(pooled))
}

/// Augmented branch: the same blocks without a nonverbal shift.
pub fn encode_augmented<T: Real>(g: &mut Graph<'_, T>, encoder: &Encoder, seq: &TokenSequence) -> Result<Encoded> {
    encoder.run(g, seq, None)
}

/// `B × (B·len)` matrix averaging each sample's flagged rows.
fn pooling_matrix<T: Real>(mask: &[bool], batch: usize, len: usize) -> Result<Matrix<T>> {
    if mask.len() != batch * len {
        return Err(Error::Shape {
            op: "mean_pool",
            left: (mask.len(), 1),
            right: (batch * len, 1),
        });
    }
    let mut pool = Matrix::zeros(batch, batch * len);
    for b in 0..batch {
        let valid = &mask[b * len..(b + 1) * len];
        let count = valid.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate(format!("sample {b} has no valid tokens to pool")));
        }
        let w = T::one() / T::from_usize(count).unwrap();
        for (i, _) in valid.iter().enumerate().filter(|(_, &m)| m) {
            pool.set(b, b * len + i, w);
        }
    }
    Ok(pool)
}

/// Mean over the valid rows of each sample: `B × d`.
pub fn mean_pool<T: Real>(g: &mut Graph<'_, T>, tokens: Var, mask: &[bool], batch: usize, len: usize) -> Result<Var> {
    let pool = g.constant(pooling_matrix(mask, batch, len)?);
    g.matmul(pool, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{assemble, EmbeddingTable, SequenceLayout};
    use crate::substrate::{grad_check, RngSeed};

    const D: usize = 8;

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        Initializer::new(RngSeed(seed)).normal(rows, cols, 1.0)
    }

    fn dims(layers: usize) -> EncoderDims {
        EncoderDims {
            width: D,
            layers,
            heads: 2,
            gate_index: 0,
            gate_beta: 0.5,
            nonverbal_width: 3,
        }
    }

    fn setup(layers: usize) -> (ParamStore<f64>, Encoder, EmbeddingTable) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(RngSeed(21));
        let enc = Encoder::new(&mut store, &mut init, dims(layers)).unwrap();
        let table = EmbeddingTable::new(&mut store, &mut init, 10, D, 12);
        (store, enc, table)
    }

    /// Two sequences of `text_len = 4`, prompt of 2, the first with one
    /// padded text slot.
    fn sequence(g: &mut Graph<'_, f64>, table: &EmbeddingTable, text: Matrix<f64>) -> TokenSequence {
        let layout = SequenceLayout {
            text_len: 4,
            prompt_len: Some(2),
        };
        let z_text = g.constant(text);
        let prompt = g.constant(rand(4, D, 7));
        let special = g.constant(rand(2, D, 8));
        assemble(g, table, layout, z_text, &[3, 4], Some(prompt), special).unwrap()
    }

    fn nonverbal(g: &mut Graph<'_, f64>) -> (Var, Var) {
        (g.constant(rand(6, 3, 30)), g.constant(rand(6, 3, 31)))
    }

    #[test]
    fn zero_fusion_makes_branches_agree() {
        let (mut store, enc, table) = setup(2);
        enc.gate.fusion.zero(&mut store);
        let mut g = Graph::new(&store);
        let seq = sequence(&mut g, &table, rand(10, D, 1));
        let (v, a) = nonverbal(&mut g);
        let n = encode_normal(&mut g, &enc, &seq, v, a, 3).unwrap();
        let m = encode_augmented(&mut g, &enc, &seq).unwrap();
        assert_eq!(g.value(n.tokens), g.value(m.tokens));
        assert_eq!(g.value(n.special), g.value(m.special));
    }

    #[test]
    fn augmented_branch_is_pure() {
        let (store, enc, table) = setup(2);
        let mut g = Graph::new(&store);
        let seq = sequence(&mut g, &table, rand(10, D, 1));
        let a = encode_augmented(&mut g, &enc, &seq).unwrap();
        let b = encode_augmented(&mut g, &enc, &seq).unwrap();
        assert_eq!(g.value(a.tokens), g.value(b.tokens));
    }

    #[test]
    fn padded_positions_do_not_leak() {
        let (store, enc, table) = setup(2);
        let text = rand(10, D, 1);
        let mut noisy = text.clone();
        // row 4 of the first sample is its padded text slot
        noisy.row_mut(4).iter_mut().for_each(|x| *x = *x * 50.0 - 3.0);
        let mut g = Graph::new(&store);
        let s1 = sequence(&mut g, &table, text);
        let s2 = sequence(&mut g, &table, noisy);
        let (v, a) = nonverbal(&mut g);
        let o1 = encode_normal(&mut g, &enc, &s1, v, a, 3).unwrap();
        let o2 = encode_normal(&mut g, &enc, &s2, v, a, 3).unwrap();
        for r in 0..16 {
            if s1.attention_mask[r] {
                let diff = g.value(o1.tokens).row(r).iter().zip(g.value(o2.tokens).row(r));
                diff.for_each(|(x, y)| assert!((x - y).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn gate_without_displacement_is_layer_norm() {
        let (mut store, enc, _) = setup(1);
        enc.gate.fusion.zero(&mut store);
        let mut g = Graph::new(&store);
        let h = g.constant(rand(4, D, 3));
        let pooled = g.constant(rand(2, 6, 4));
        let out = adaptation_gate(&mut g, &enc.gate, h, pooled, 2).unwrap();
        let expected = enc.gate.norm.forward(&mut g, h).unwrap();
        assert_eq!(g.value(out), g.value(expected));
    }

    #[test]
    fn tiny_beta_approaches_layer_norm() {
        let (store, mut enc, _) = setup(1);
        enc.gate.beta = 1e-9;
        let mut g = Graph::new(&store);
        let h = g.constant(rand(4, D, 3));
        let pooled = g.constant(rand(2, 6, 4));
        let out = adaptation_gate(&mut g, &enc.gate, h, pooled, 2).unwrap();
        let expected = enc.gate.norm.forward(&mut g, h).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expected)) < 1e-7);
    }

    #[test]
    fn displacement_is_bounded() {
        let (store, enc, _) = setup(1);
        for seed in 0..20 {
            let mut g = Graph::new(&store);
            let hm = rand(4, D, seed).map(|x| x * (seed as f64 * 0.3 + 0.01));
            let h = g.constant(hm.clone());
            let pooled = g.constant(rand(2, 6, seed + 100).map(|x| x * 20.0));
            let shift = gate_shift(&mut g, &enc.gate, h, pooled, 2).unwrap();
            let norms = g.value(shift).row_norms();
            for (r, n) in norms.iter().enumerate() {
                let hn = hm.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(*n <= enc.gate.beta * hn + 1e-6);
            }
        }
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
    }

    fn dense(x: &Matrix<f64>, lin: &Linear, store: &ParamStore<f64>) -> Matrix<f64> {
        let mut y = x.matmul(store.value(lin.weight)).unwrap();
        if let Some(b) = lin.bias {
            let b = store.value(b);
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    y.set(r, c, y.get(r, c) + b.get(0, c));
                }
            }
        }
        y
    }

    fn ln(x: &Matrix<f64>, n: &LayerNorm, store: &ParamStore<f64>) -> Matrix<f64> {
        x.layer_norm(store.value(n.gamma).row(0), store.value(n.beta).row(0), n.eps)
            .unwrap()
    }

    #[test]
    fn single_block_matches_dense_oracle() {
        let (store, enc, table) = setup(1);
        let mut g = Graph::new(&store);
        let seq = sequence(&mut g, &table, rand(10, D, 1));
        let out = encode_augmented(&mut g, &enc, &seq).unwrap();
        let input = g.value(seq.embeddings).clone();
        let block = &enc.blocks[0];

        let x = ln(&input, &enc.input_norm, &store);
        let (q, k, v) = (
            dense(&x, &block.query, &store),
            dense(&x, &block.key, &store),
            dense(&x, &block.value, &store),
        );
        let mut attn = Matrix::zeros(16, D);
        for b in 0..2 {
            for h in 0..2 {
                let cols = |m: &Matrix<f64>| Matrix::from_fn(8, 4, |r, c| m.get(b * 8 + r, h * 4 + c));
                let (qh, kh, vh) = (cols(&q), cols(&k), cols(&v));
                let mask: Vec<bool> = (0..8).flat_map(|_| seq.sample_mask(b).to_vec()).collect();
                let p = qh
                    .matmul(&kh.transpose())
                    .unwrap()
                    .map(|s| s / 2.0)
                    .softmax_rows_masked(Some(&mask));
                let o = p.matmul(&vh).unwrap();
                for r in 0..8 {
                    for c in 0..4 {
                        attn.set(b * 8 + r, h * 4 + c, o.get(r, c));
                    }
                }
            }
        }
        let mut y = dense(&attn, &block.output, &store);
        y.add_assign(&x);
        let y = ln(&y, &block.norm1, &store);
        let f = dense(&dense(&y, &block.ffn.first, &store).map(gelu), &block.ffn.second, &store);
        let mut y2 = f;
        y2.add_assign(&y);
        let y2 = ln(&y2, &block.norm2, &store);
        let expected = ln(&y2, &enc.gate.norm, &store);
        assert!(g.value(out.tokens).max_abs_diff(&expected) < 1e-10);
        assert_eq!(g.value(out.special).row(1), g.value(out.tokens).row(15));
    }

    #[test]
    fn encoder_and_gate_gradient() {
        let (mut store, enc, table) = setup(2);
        let text = rand(10, D, 1);
        let report = grad_check(
            &mut store,
            |g| {
                let seq = sequence(g, &table, text.clone());
                let (v, a) = nonverbal(g);
                let out = encode_normal(g, &enc, &seq, v, a, 3)?;
                let pooled = mean_pool(g, out.tokens, &seq.attention_mask, 2, 8)?;
                let s = g.mul(pooled, pooled)?;
                let p = g.mean_all(s);
                let sp = g.mean_all(out.special);
                g.add(p, sp)
            },
            1e-5,
            40,
            RngSeed(3),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn mean_pool_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Matrix::from_rows(&[[1.0, 3.0], [3.0, 1.0]]).unwrap());
        let p = mean_pool(&mut g, x, &[true, true], 1, 2).unwrap();
        assert_eq!(g.value(p).row(0), &[2.0, 2.0]);
        let p = mean_pool(&mut g, x, &[false, true], 1, 2).unwrap();
        assert_eq!(g.value(p).row(0), &[3.0, 1.0]);
        assert!(matches!(
            mean_pool(&mut g, x, &[false, false], 1, 2),
            Err(Error::Degenerate(_))
        ));

        let m = rand(6, 3, 2);
        let mask = [true, false, true, false, false, true];
        let x = g.constant(m.clone());
        let p = mean_pool(&mut g, x, &mask, 2, 3).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let rows: Vec<usize> = (0..3).filter(|&i| mask[b * 3 + i]).map(|i| b * 3 + i).collect();
                let expected = rows.iter().map(|&r| m.get(r, c)).sum::<f64>() / rows.len() as f64;
                assert!((g.value(p).get(b, c) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bad_gate_index_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Initializer::new(RngSeed(0));
        let mut d = dims(2);
        d.gate_index = 2;
        assert!(Encoder::new(&mut store, &mut init, d).is_err());
    }
}
