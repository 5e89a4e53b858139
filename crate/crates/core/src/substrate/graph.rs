//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! referenced from a borrowed [`ParamStore`] rather than copied, and
//! [`Graph::backward`] returns their gradients as a [`ParamGrads`].

use super::{Matrix, ParamGrads, ParamId, ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Recip(Var),
    MinConst(Var, T),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var, Option<Vec<bool>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    RowNorms(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var, Vec<bool>),
    MaxRowNormScale {
        x: Var,
        scale: T,
        argmax: Option<usize>,
    },
    CrossEntropy(Var, Vec<usize>),
    PickSum(Var, Vec<(usize, usize)>, T),
    SumAll(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttentionSegment>,
        probs: Vec<Matrix<T>>,
    },
}

/// One independent attention problem inside a stacked batch: queries are
/// rows `query_start..query_start + query_len` of `q`, keys and values are
/// rows `key_start..key_start + key_len` of `k` and `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSegment {
    pub query_start: usize,
    pub query_len: usize,
    pub key_start: usize,
    pub key_len: usize,
    /// Keys flagged `false` receive zero attention weight.
    pub key_mask: Option<Vec<bool>>,
}

struct Node<T> {
    value: Option<Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Shape { op, left, right }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        match &self.nodes[v.0] {
            Node {
                op: Op::Param(id), ..
            } => self.store.value(*id),
            Node { value: Some(m), .. } => m,
            Node { value: None, .. } => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).get(0, 0)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new node that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("matmul_bt", av.shape(), bv.shape()));
        }
        let out = av.matmul(&bv.transpose())?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av.shape(), bv.shape()));
        }
        let data = av
            .as_slice()
            .iter()
            .zip(bv.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Matrix::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        let r = rv.as_slice();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Scales row `i` of an m×n matrix by entry `i` of an m×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err("mul_col", av.shape(), cv.shape()));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let s = cv.get(i, 0);
            out.row_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        Ok(self.push(out, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / x);
        self.push(out, Op::Recip(a), &[a])
    }

    /// Element-wise `min(a, k)`.
    pub fn min_const(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x.min(k));
        self.push(out, Op::MinConst(a, k), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let k = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, None)
    }

    /// Row-wise softmax; entries with `mask[i] == false` (row-major) get zero
    /// weight and receive no gradient.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let out = self.value(a).softmax_rows_masked(mask);
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Row-wise log-softmax. Masked entries are excluded from the normalizer
    /// and their output is defined as zero.
    pub fn log_softmax_rows_masked(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = av.clone();
        for r in 0..av.rows() {
            let keep = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
            let row = out.row_mut(r);
            let max = row
                .iter()
                .enumerate()
                .filter(|(c, _)| keep(*c))
                .map(|(_, &v)| v)
                .fold(T::neg_infinity(), T::max);
            let lse = row
                .iter()
                .enumerate()
                .filter(|(c, _)| keep(*c))
                .map(|(_, &v)| (v - max).exp())
                .sum::<T>()
                .ln()
                + max;
            for (c, v) in row.iter_mut().enumerate() {
                *v = if keep(c) { *v - lse } else { T::zero() };
            }
        }
        self.push(out, Op::LogSoftmax(a, mask), &[a])
    }

    /// Layer normalization over each row. `gamma` and `beta` are 1×n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let ones = Matrix::filled(1, xv.cols(), T::one());
        let zeros = Matrix::zeros(1, xv.cols());
        let xhat = xv.layer_norm(ones.as_slice(), zeros.as_slice(), eps)?;
        if gv.shape() != (1, xv.cols()) || bv.shape() != (1, xv.cols()) {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let n = T::from_usize(xv.cols()).unwrap();
        let rstd = (0..xv.rows())
            .map(|r| {
                let row = xv.row(r);
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                T::one() / (var + eps).sqrt()
            })
            .collect();
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * gv.get(0, c) + bv.get(0, c);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Euclidean norm of every row, as an m×1 column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let norms = self.value(a).row_norms();
        let out = Matrix::from_vec(norms.len(), 1, norms).expect("m×1");
        self.push(out, Op::RowNorms(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&mats)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(shape_err("concat_cols", (rows, cols), pv.shape()));
            }
            cols += pv.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(shape_err("slice_rows", av.shape(), (start, len)));
        }
        let out = Matrix::from_vec(
            len,
            av.cols(),
            av.as_slice()[start * av.cols()..(start + len) * av.cols()].to_vec(),
        )?;
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(shape_err("slice_cols", av.shape(), (start, len)));
        }
        let out = Matrix::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(Error::Vocabulary {
                    id,
                    vocab_size: tv.rows(),
                });
            }
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    /// Mean over the rows flagged in `mask`, as a 1×n row.
    pub fn mean_rows_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.rows() {
            return Err(shape_err("mean_rows", av.shape(), (mask.len(), 1)));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("mean pooling over zero valid rows".into()));
        }
        let inv = T::one() / T::from_usize(count).unwrap();
        let mut out = Matrix::zeros(1, av.cols());
        for r in (0..av.rows()).filter(|&r| mask[r]) {
            for (o, &v) in out.row_mut(0).iter_mut().zip(av.row(r)) {
                *o += v * inv;
            }
        }
        Ok(self.push(out, Op::MeanRows(a, mask.to_vec()), &[a]))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let mask = vec![true; self.value(a).rows()];
        self.mean_rows_masked(a, &mask)
    }

    /// Divides the whole matrix by its largest row norm, floored at `eps`.
    pub fn max_row_norm_scale(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let norms = av.row_norms();
        let (argmax, max) = norms
            .iter()
            .enumerate()
            .fold((None, T::neg_infinity()), |(bi, bv), (i, &v)| {
                if v > bv {
                    (Some(i), v)
                } else {
                    (bi, bv)
                }
            });
        let (scale, argmax) = if max > eps { (max, argmax) } else { (eps, None) };
        let out = av.map(|x| x / scale);
        self.push(
            out,
            Op::MaxRowNormScale {
                x: a,
                scale,
                argmax,
            },
            &[a],
        )
    }

    /// Mean cross-entropy of row-wise logits against integer labels (1×1).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() {
            return Err(shape_err("cross_entropy", lv.shape(), (labels.len(), 1)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::Label {
                label: bad,
                num_labels: lv.cols(),
            });
        }
        let n = T::from_usize(labels.len().max(1)).unwrap();
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = lv.row(i);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                lse - row[y]
            })
            .sum();
        let out = Matrix::filled(1, 1, total / n);
        Ok(self.push(out, Op::CrossEntropy(logits, labels.to_vec()), &[logits]))
    }

    /// `scale · Σ a[r, c]` over the given coordinates (1×1).
    pub fn pick_sum(&mut self, a: Var, coords: &[(usize, usize)], scale: T) -> Result<Var> {
        let av = self.value(a);
        let mut total = T::zero();
        for &(r, c) in coords {
            if r >= av.rows() || c >= av.cols() {
                return Err(shape_err("pick_sum", av.shape(), (r, c)));
            }
            total += av.get(r, c);
        }
        let out = Matrix::filled(1, 1, total * scale);
        Ok(self.push(out, Op::PickSum(a, coords.to_vec(), scale), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len().max(1)).unwrap();
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// Scaled dot-product attention with `heads` column groups, evaluated
    /// independently per segment. Output rows follow segment order.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttentionSegment>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if heads == 0 || qv.cols() % heads != 0 || vv.cols() % heads != 0 {
            return Err(Error::config(format!(
                "width {} / {} not divisible by {heads} heads",
                qv.cols(),
                vv.cols()
            )));
        }
        if qv.cols() != kv.cols() {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        if kv.rows() != vv.rows() {
            return Err(shape_err("attention", kv.shape(), vv.shape()));
        }
        for s in &segments {
            if s.query_start + s.query_len > qv.rows()
                || s.key_start + s.key_len > kv.rows()
                || s.key_mask.as_ref().is_some_and(|m| m.len() != s.key_len)
            {
                return Err(shape_err("attention", qv.shape(), kv.shape()));
            }
        }
        let dk = qv.cols() / heads;
        let dv = vv.cols() / heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let total: usize = segments.iter().map(|s| s.query_len).sum();
        let mut out = Matrix::zeros(total, vv.cols());
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut row0 = 0;
        for s in &segments {
            for h in 0..heads {
                let scores = Matrix::from_fn(s.query_len, s.key_len, |i, j| {
                    let qr = &qv.row(s.query_start + i)[h * dk..(h + 1) * dk];
                    let kr = &kv.row(s.key_start + j)[h * dk..(h + 1) * dk];
                    qr.iter().zip(kr).map(|(&a, &b)| a * b).sum::<T>() * scale
                });
                let mask: Option<Vec<bool>> = s
                    .key_mask
                    .as_ref()
                    .map(|m| (0..s.query_len).flat_map(|_| m.iter().copied()).collect());
                let p = scores.softmax_rows_masked(mask.as_deref());
                for i in 0..s.query_len {
                    let orow = &mut out.row_mut(row0 + i)[h * dv..(h + 1) * dv];
                    for j in 0..s.key_len {
                        let w = p.get(i, j);
                        if w == T::zero() {
                            continue;
                        }
                        let vr = &vv.row(s.key_start + j)[h * dv..(h + 1) * dv];
                        for (o, &x) in orow.iter_mut().zip(vr) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
            row0 += s.query_len;
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights of an [`attention`](Self::attention) node, one
    /// `query_len × key_len` matrix per (segment, head) in segment-major order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Matrix<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates from a 1×1 node and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward", self.shape(loss), (1, 1)));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        let mut out = ParamGrads {
            grads: (0..self.store.len()).map(|_| None).collect(),
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
        out: &mut ParamGrads<T>,
    ) {
        let mut acc = |v: Var, delta: Matrix<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match &mut out.grads[id.0] {
                Some(existing) => existing.add_assign(g),
                slot => *slot = Some(g.clone()),
            },
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(&bv.transpose()).unwrap());
                acc(*b, av.transpose().matmul(g).unwrap());
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(bv).unwrap());
                acc(*b, g.transpose().matmul(av).unwrap());
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, hadamard(g, bv));
                acc(*b, hadamard(g, av));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, &x) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(*row, db);
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let mut da = g.clone();
                let mut dc = Matrix::zeros(cv.rows(), 1);
                for r in 0..g.rows() {
                    let s = cv.get(r, 0);
                    da.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    let dot: T = g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum();
                    dc.set(r, 0, dot);
                }
                acc(*a, da);
                acc(*col, dc);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Recip(a) => {
                let y = node.value.as_ref().unwrap();
                let d = zip(g, y, |gi, yi| -gi * yi * yi);
                acc(*a, d);
            }
            Op::MinConst(a, k) => {
                let av = self.value(*a);
                acc(*a, zip(g, av, |gi, x| if x < *k { gi } else { T::zero() }));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let c = T::from_f64_lossy(GELU_C);
                let k = T::from_f64_lossy(GELU_A);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                acc(
                    *a,
                    zip(g, av, |gi, x| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = c * (T::one() + three * k * x * x);
                        gi * (half * (T::one() + t) + half * x * (T::one() - t * t) * dt)
                    }),
                );
            }
            Op::Softmax(a) => {
                let y = node.value.as_ref().unwrap();
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&x, &p)| x * p).sum();
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a, mask) => {
                let y = node.value.as_ref().unwrap();
                let cols = y.cols();
                let mut d = Matrix::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let keep = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
                    let gsum: T = (0..cols).filter(|&c| keep(c)).map(|c| g.get(r, c)).sum();
                    for c in (0..cols).filter(|&c| keep(c)) {
                        d.set(r, c, g.get(r, c) - y.get(r, c).exp() * gsum);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let cols = xhat.cols();
                let n = T::from_usize(cols).unwrap();
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(xhat.rows(), cols);
                for r in 0..xhat.rows() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for c in 0..cols {
                        let gi = g.get(r, c);
                        let xh = xhat.get(r, c);
                        dgamma.row_mut(0)[c] += gi * xh;
                        dbeta.row_mut(0)[c] += gi;
                        let dxh = gi * gv.get(0, c);
                        mean_d += dxh;
                        mean_dx += dxh * xh;
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for c in 0..cols {
                        let dxh = g.get(r, c) * gv.get(0, c);
                        let xh = xhat.get(r, c);
                        dx.set(r, c, rstd[r] * (dxh - mean_d - xh * mean_dx));
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::RowNorms(a) => {
                let av = self.value(*a);
                let norms = node.value.as_ref().unwrap();
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let n = norms.get(r, 0);
                    if n > T::zero() {
                        let s = g.get(r, 0) / n;
                        for (o, &x) in d.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = s * x;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let d = Matrix::from_vec(
                        rows,
                        g.cols(),
                        g.as_slice()[start * g.cols()..(start + rows) * g.cols()].to_vec(),
                    )
                    .unwrap();
                    acc(p, d);
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    acc(p, Matrix::from_fn(g.rows(), cols, |r, c| g.get(r, start + c)));
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::GatherRows(table, ids) => {
                let tv = self.value(*table);
                let mut d = Matrix::zeros(tv.rows(), tv.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &x) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(*table, d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let heads = *heads;
                let dk = qv.cols() / heads;
                let dv = vv.cols() / heads;
                let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
                let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                let mut dkm = Matrix::zeros(kv.rows(), kv.cols());
                let mut dvm = Matrix::zeros(vv.rows(), vv.cols());
                let mut row0 = 0;
                for (si, s) in segments.iter().enumerate() {
                    for h in 0..heads {
                        let p = &probs[si * heads + h];
                        for i in 0..s.query_len {
                            let grow = &g.row(row0 + i)[h * dv..(h + 1) * dv];
                            let dp: Vec<T> = (0..s.key_len)
                                .map(|j| {
                                    let vr = &vv.row(s.key_start + j)[h * dv..(h + 1) * dv];
                                    grow.iter().zip(vr).map(|(&a, &b)| a * b).sum()
                                })
                                .collect();
                            let dot: T = (0..s.key_len).map(|j| p.get(i, j) * dp[j]).sum();
                            for j in 0..s.key_len {
                                let pij = p.get(i, j);
                                if pij == T::zero() {
                                    continue;
                                }
                                let dvr = &mut dvm.row_mut(s.key_start + j)[h * dv..(h + 1) * dv];
                                for (o, &x) in dvr.iter_mut().zip(grow) {
                                    *o += pij * x;
                                }
                                let ds = pij * (dp[j] - dot) * scale;
                                let qi = s.query_start + i;
                                let kj = s.key_start + j;
                                for c in h * dk..(h + 1) * dk {
                                    let (qc, kc) = (qv.get(qi, c), kv.get(kj, c));
                                    dq.row_mut(qi)[c] += ds * kc;
                                    dkm.row_mut(kj)[c] += ds * qc;
                                }
                            }
                        }
                    }
                    row0 += s.query_len;
                }
                acc(*q, dq);
                acc(*k, dkm);
                acc(*v, dvm);
            }
            Op::MeanRows(a, mask) => {
                let av = self.value(*a);
                let count = mask.iter().filter(|&&m| m).count();
                let inv = T::one() / T::from_usize(count).unwrap();
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for r in (0..av.rows()).filter(|&r| mask[r]) {
                    for (o, &x) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                        *o = x * inv;
                    }
                }
                acc(*a, d);
            }
            Op::MaxRowNormScale { x, scale, argmax } => {
                let xv = self.value(*x);
                let mut d = g.map(|gi| gi / *scale);
                if let Some(k) = *argmax {
                    // d(scale)/dx_k = x_k / |x_k| since scale = |x_k|
                    let dot: T = g
                        .as_slice()
                        .iter()
                        .zip(xv.as_slice())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    let coeff = -dot / (*scale * *scale * *scale);
                    for (o, &xi) in d.row_mut(k).iter_mut().zip(xv.row(k)) {
                        *o += coeff * xi;
                    }
                }
                acc(*x, d);
            }
            Op::CrossEntropy(logits, labels) => {
                let lv = self.value(*logits);
                let mut d = lv.softmax_rows();
                let n = T::from_usize(labels.len()).unwrap();
                let gi = g.get(0, 0) / n;
                for (r, &y) in labels.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[y] -= T::one();
                    row.iter_mut().for_each(|v| *v *= gi);
                }
                acc(*logits, d);
            }
            Op::PickSum(a, coords, scale) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                let s = g.get(0, 0) * *scale;
                for &(r, c) in coords {
                    d.set(r, c, d.get(r, c) + s);
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                acc(*a, Matrix::filled(av.rows(), av.cols(), g.get(0, 0)));
            }
        }
    }
}

fn zip<T: Real>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).unwrap()
}

fn hadamard<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    zip(a, b, |x, y| x * y)
}
