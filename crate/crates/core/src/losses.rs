//! Token-level contrastive loss, classification loss and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::substrate::{Graph, Real, Var};

/// NT-Xent over `2N` token rows ordered `[m_1, l_1, m_2, l_2, …]`, where
/// `(m_k, l_k)` is a positive pair and every other row is a negative.
///
/// For anchor `i` with partner `j`,
/// `l_ij = −log(exp(cos(z_i, z_j)/τ) / Σ_{k≠i} exp(cos(z_i, z_k)/τ))`,
/// and the loss is the mean of `l_ij` over all `2N` anchors, i.e. the
/// per-pair average of `l_ij + l_ji` divided by two. It is non-negative and
/// equals zero for `N = 1`.
pub fn nt_xent<T: Real>(g: &mut Graph<'_, T>, tokens: Var, tau: f64) -> Result<Var> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let (rows, _) = g.shape(tokens);
    if rows == 0 || rows % 2 != 0 {
        return Err(Error::Shape {
            op: "nt_xent",
            left: g.shape(tokens),
            right: (2 * rows.div_ceil(2).max(1), g.shape(tokens).1),
        });
    }
    let norms = g.row_norms(tokens);
    if let Some(r) = g.value(norms).as_slice().iter().position(|&n| n == T::zero()) {
        return Err(Error::Degenerate(format!("token {r} has zero norm")));
    }
    let inv = g.recip(norms);
    let unit = g.mul_col(tokens, inv)?;
    let sim = g.matmul_bt(unit, unit)?;
    let logits = g.scale(sim, T::from_f64_lossy(1.0 / tau));
    let mask: Vec<bool> = (0..rows * rows).map(|k| k / rows != k % rows).collect();
    let log_p = g.log_softmax_rows_masked(logits, Some(mask));
    let partners: Vec<(usize, usize)> = (0..rows).map(|i| (i, i ^ 1)).collect();
    g.pick_sum(log_p, &partners, T::from_f64_lossy(-1.0 / rows as f64))
}

/// Interleaves two `N × d` matrices into the `[a_1, b_1, a_2, b_2, …]`
/// layout [`nt_xent`] expects.
pub fn interleave_pairs<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op: "interleave_pairs",
            left: g.shape(a),
            right: g.shape(b),
        });
    }
    let n = g.shape(a).0;
    let both = g.concat_rows(&[a, b])?;
    let order: Vec<usize> = (0..n).flat_map(|k| [k, n + k]).collect();
    g.gather_rows(both, &order)
}

/// Mean cross-entropy of the linear classifier's logits on pooled features.
pub fn cls_loss<T: Real>(g: &mut Graph<'_, T>, pooled: Var, labels: &[usize], classifier: &Linear) -> Result<Var> {
    let logits = classifier.forward(g, pooled)?;
    g.cross_entropy(logits, labels)
}

/// Unweighted sum; a missing contrastive term counts as zero.
pub fn total_loss<T: Real>(g: &mut Graph<'_, T>, contrastive: Option<Var>, classification: Var) -> Result<Var> {
    match contrastive {
        Some(c) => g.add(c, classification),
        None => Ok(classification),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub contrastive: f64,
    pub classification: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(contrastive: f64, classification: f64) -> Self {
        Self {
            contrastive,
            classification,
            total: contrastive + classification,
        }
    }
}
