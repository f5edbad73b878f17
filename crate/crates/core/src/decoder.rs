//! Transformer decoder with causal self-attention, cross-attention over
//! encoder states and a language-model head tied to the token embeddings.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{causal_mask, feed_forward, key_padding_mask, layer_norm, multi_head_attention};
use crate::model::{dec_prefix, Net};
use crate::scalar::Scalar;

pub struct DecoderOutput {
    /// `len x vocab`.
    pub logits: Var,
    /// Final normalized hidden states, `len x d_model`.
    pub hidden: Var,
}

/// Teacher-forced pass over decoder inputs `ids`. Row `i` of the output
/// sees inputs `0..=i` only.
pub fn decode_train<T: Scalar>(
    g: &mut Graph<T>,
    net: Net<'_, T>,
    ids: &[usize],
    memory: Var,
    memory_padding: &[bool],
) -> Result<DecoderOutput> {
    let cfg = &net.config.decoder;
    let eps = net.config.layer_norm_eps;
    let params = net.params;
    if ids.is_empty() || ids.len() > cfg.max_output_len {
        return Err(Error::Length(format!(
            "decoder input of {} tokens outside 1..={}",
            ids.len(),
            cfg.max_output_len
        )));
    }
    if memory_padding.len() != g.value(memory).rows() {
        return Err(Error::shape("memory padding mask does not match encoder states"));
    }
    if memory_padding.iter().all(|&p| p) {
        return Err(Error::Usage("encoder states are entirely padding".into()));
    }
    let n = ids.len();
    let tokens = g.param(params, "embed.tokens")?;
    let positions = g.param(params, "embed.dec_pos")?;
    let tok = g.embedding(tokens, ids)?;
    let pos_ids: Vec<usize> = (0..n).collect();
    let pos = g.embedding(positions, &pos_ids)?;
    let mut x = g.add(tok, pos)?;

    let self_mask = causal_mask(n);
    let cross_mask = key_padding_mask(n, memory_padding);
    for l in 0..cfg.num_layers {
        let p = dec_prefix(l);
        let normed = layer_norm(g, params, &format!("{p}.ln1"), x, eps)?;
        let sa = multi_head_attention(g, params, &format!("{p}.self_attn"), cfg.num_heads, normed, normed, &self_mask)?;
        x = g.add(x, sa.output)?;
        let normed = layer_norm(g, params, &format!("{p}.ln2"), x, eps)?;
        let ca = multi_head_attention(g, params, &format!("{p}.cross_attn"), cfg.num_heads, normed, memory, &cross_mask)?;
        x = g.add(x, ca.output)?;
        let normed = layer_norm(g, params, &format!("{p}.ln3"), x, eps)?;
        let ff = feed_forward(g, params, &format!("{p}.ffn"), normed)?;
        x = g.add(x, ff)?;
    }
    let hidden = layer_norm(g, params, "dec.final_ln", x, eps)?;
    let logits = tied_logits(g, net, hidden)?;
    Ok(DecoderOutput { logits, hidden })
}

/// Vocabulary logits `hidden · E^T` with `E` the token embedding table.
pub fn tied_logits<T: Scalar>(g: &mut Graph<T>, net: Net<'_, T>, hidden: Var) -> Result<Var> {
    let table = g.param(net.params, "embed.tokens")?;
    let table_t = g.transpose(table)?;
    g.matmul(hidden, table_t)
}
