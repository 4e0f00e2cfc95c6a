//! Graph-level building blocks: cross-attention, the MLP head and the
//! optional self-attention refinement block.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix, Var};

/// Attention weights and the attended values.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `m x p`, rows sum to 1.
    pub weights: Var,
    /// `m x d_k`.
    pub output: Var,
}

/// Single-head cross-attention of `queries` (m x dq) over `keys_values` (p x dkv).
///
/// `Q = X1 W_q`, `K = X2 W_k`, `V = X2 W_v` (or `V = K` when `w_v` is
/// `None`), `A = softmax_rows(Q K^T / sqrt(d_k))`, output `A V`.
pub fn attend(
    g: &mut Graph,
    w_q: Var,
    w_k: Var,
    w_v: Option<Var>,
    queries: Var,
    keys_values: Var,
) -> Result<Attended> {
    let d_k = g.shape(w_q).1;
    if g.shape(w_k).1 != d_k {
        return Err(Error::dim(
            "cross_attention projections",
            g.shape(w_q),
            g.shape(w_k),
        ));
    }
    let q = g.matmul(queries, w_q)?;
    let k = g.matmul(keys_values, w_k)?;
    let v = match w_v {
        Some(w_v) => g.matmul(keys_values, w_v)?,
        None => k,
    };
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = g.softmax_rows(scaled)?;
    let output = g.matmul(weights, v)?;
    Ok(Attended { weights, output })
}

/// Projection matrices of the fusion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionLayer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    /// `None` when values share the key projection.
    pub w_v: Option<Matrix>,
}

impl CrossAttentionLayer {
    /// Returns `(weights, output)` evaluated without gradient tracking.
    pub fn forward(&self, x1: &Matrix, x2: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new();
        let w_q = g.constant(self.w_q.clone())?;
        let w_k = g.constant(self.w_k.clone())?;
        let w_v = self.w_v.clone().map(|m| g.constant(m)).transpose()?;
        let x1 = g.constant(x1.clone())?;
        let x2 = g.constant(x2.clone())?;
        let a = attend(&mut g, w_q, w_k, w_v, x1, x2)?;
        Ok((g.value(a.weights).clone(), g.value(a.output).clone()))
    }
}

/// `relu(x W1 + b1) W2 + b2`, with a final ReLU when `outer_relu`.
pub fn mlp(
    g: &mut Graph,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    x: Var,
    outer_relu: bool,
) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h)?;
    let z = g.matmul(h, w2)?;
    let z = g.add(z, b2)?;
    if outer_relu {
        g.relu(z)
    } else {
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl MlpHead {
    pub fn forward(&self, x: &Matrix, outer_relu: bool) -> Result<Matrix> {
        let mut g = Graph::new();
        let [w1, b1, w2, b2, x] =
            [&self.w1, &self.b1, &self.w2, &self.b2, x].map(|m| g.constant(m.clone()));
        let out = mlp(&mut g, w1?, b1?, w2?, b2?, x?, outer_relu)?;
        Ok(g.value(out).clone())
    }
}

/// Parameter slots of one refinement block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockSlots {
    pub w_q: usize,
    pub b_q: usize,
    pub w_k: usize,
    pub b_k: usize,
    pub w_v: usize,
    pub b_v: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub norm1_gain: usize,
    pub norm1_bias: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
    pub norm2_gain: usize,
    pub norm2_bias: usize,
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm_rows(x, LAYER_NORM_EPS)?;
    let n = g.mul(n, gain)?;
    g.add(n, bias)
}

/// Post-norm transformer encoder block: multi-head self-attention and a
/// ReLU feed-forward layer, each wrapped in a residual and layer norm.
pub(crate) fn refine_block(
    g: &mut Graph,
    p: &[Var],
    s: &BlockSlots,
    heads: usize,
    x: Var,
) -> Result<Var> {
    let d = g.shape(x).1;
    let dh = d / heads;
    let q = affine(g, x, p[s.w_q], p[s.b_q])?;
    let k = affine(g, x, p[s.w_k], p[s.b_k])?;
    let v = affine(g, x, p[s.w_v], p[s.b_v])?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let a = g.softmax_rows(scores)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = g.concat_cols(&outs)?;
    let attn = affine(g, cat, p[s.w_o], p[s.b_o])?;
    let res = g.add(x, attn)?;
    let x1 = layer_norm(g, res, p[s.norm1_gain], p[s.norm1_bias])?;

    let h = affine(g, x1, p[s.ff_w1], p[s.ff_b1])?;
    let h = g.relu(h)?;
    let ff = affine(g, h, p[s.ff_w2], p[s.ff_b2])?;
    let res = g.add(x1, ff)?;
    layer_norm(g, res, p[s.norm2_gain], p[s.norm2_bias])
}
