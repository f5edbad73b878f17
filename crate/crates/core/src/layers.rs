//! Building blocks shared by the encoder and the decoder.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic attention matrix of each head (queries x keys).
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with per-head projections
/// `{prefix}.h{h}.{wq,wk,wv}`, head concatenation and output projection
/// `{prefix}.wo`. `blocked[i * keys + j]` hides key `j` from query `i`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    prefix: &str,
    num_heads: usize,
    queries: Var,
    memory: Var,
    blocked: &[bool],
) -> Result<AttentionOutput> {
    let d_model = g.value(queries).cols();
    let d_k = d_model / num_heads;
    let inv_sqrt = T::one() / T::lit(d_k as f64).sqrt();
    let any_blocked = blocked.iter().any(|&b| b);
    let mut heads = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let wq = g.param(params, &format!("{prefix}.h{h}.wq"))?;
        let wk = g.param(params, &format!("{prefix}.h{h}.wk"))?;
        let wv = g.param(params, &format!("{prefix}.h{h}.wv"))?;
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(memory, wk)?;
        let v = g.matmul(memory, wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, inv_sqrt);
        if any_blocked {
            scores = g.masked_fill(scores, blocked, T::neg_infinity())?;
        }
        let alpha = g.softmax(scores);
        heads.push(g.matmul(alpha, v)?);
        weights.push(alpha);
    }
    let cat = g.concat(&heads, 1)?;
    let wo = g.param(params, &format!("{prefix}.wo"))?;
    let output = g.matmul(cat, wo)?;
    Ok(AttentionOutput { output, weights })
}

pub fn layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Result<Var> {
    let gain = g.param(params, &format!("{prefix}.gain"))?;
    let bias = g.param(params, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, T::lit(eps))
}

/// `gelu(x W1 + b1) W2 + b2`.
pub fn feed_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w1 = g.param(params, &format!("{prefix}.w1"))?;
    let b1 = g.param(params, &format!("{prefix}.b1"))?;
    let w2 = g.param(params, &format!("{prefix}.w2"))?;
    let b2 = g.param(params, &format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, w2)?;
    g.add_bias(h, b2)
}

/// Mask hiding padded keys from every query.
pub fn key_padding_mask(queries: usize, padding: &[bool]) -> Vec<bool> {
    (0..queries).flat_map(|_| padding.iter().copied()).collect()
}

/// Mask hiding future positions (`j > i`).
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len).flat_map(|i| (0..len).map(move |j| j > i)).collect()
}
