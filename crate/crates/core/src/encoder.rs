//! Structure-aware Transformer encoder.
//!
//! Each layer runs pre-norm multi-head self-attention over the whole input
//! (linearized graph, optionally followed by `<SEP>` and text), then the
//! semantic aggregation block, then the feed-forward sublayer. The
//! aggregation block pools the hidden states of every entity and relation
//! span, lets entities attend to each other with relation-aware scores and
//! values, and adds each entity's result back onto that entity's token
//! positions.

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::graph_data::LinearizedGraph;
use crate::layers::{feed_forward, key_padding_mask, layer_norm, multi_head_attention};
use crate::model::{enc_prefix, struct_name, EncoderVariant, Net};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;
use crate::tokenizer::{special, Vocabulary};

/// Token ids plus the graph-unit positions the aggregation block needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    pub ids: Vec<usize>,
    /// Number of leading graph tokens; all unit positions lie below it.
    pub graph_len: usize,
    pub entity_positions: Vec<Vec<usize>>,
    pub relation_positions: BTreeMap<(usize, usize), Vec<usize>>,
    /// True at padding positions.
    pub padding: Vec<bool>,
}

impl EncoderInput {
    pub fn new(
        ids: Vec<usize>,
        graph_len: usize,
        entity_positions: Vec<Vec<usize>>,
        relation_positions: BTreeMap<(usize, usize), Vec<usize>>,
    ) -> Result<Self> {
        let padding = vec![false; ids.len()];
        let input = Self {
            ids,
            graph_len,
            entity_positions,
            relation_positions,
            padding,
        };
        input.check()?;
        Ok(input)
    }

    /// `graph_tokens` (the linearization or a corruption of it with the
    /// same length), then `<SEP>` and `text` when given.
    pub fn from_graph(
        vocab: &Vocabulary,
        lin: &LinearizedGraph,
        graph_tokens: &[String],
        text: Option<&[String]>,
    ) -> Result<Self> {
        if graph_tokens.len() != lin.len() {
            return Err(Error::shape("graph tokens must align with the linearization"));
        }
        let mut ids = vocab.encode(graph_tokens);
        if let Some(text) = text {
            ids.push(special::SEP_ID);
            ids.extend(vocab.encode(text));
        }
        Self::new(
            ids,
            lin.len(),
            lin.entity_positions.clone(),
            lin.relation_positions.clone(),
        )
    }

    /// Right-pads to `len` with `<PAD>`.
    pub fn padded(mut self, len: usize) -> Self {
        while self.ids.len() < len {
            self.ids.push(special::PAD_ID);
            self.padding.push(true);
        }
        self
    }

    fn check(&self) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::Length("encoder input is empty".into()));
        }
        if self.graph_len > self.ids.len() || self.padding.len() != self.ids.len() {
            return Err(Error::shape("graph span or padding mask does not fit the input"));
        }
        let all = self
            .entity_positions
            .iter()
            .flatten()
            .chain(self.relation_positions.values().flatten());
        if let Some(p) = all.copied().find(|&p| p >= self.graph_len) {
            return Err(Error::Index(format!(
                "unit position {p} outside graph span {}",
                self.graph_len
            )));
        }
        let n = self.entity_positions.len();
        if let Some(&(h, t)) = self.relation_positions.keys().find(|&&(h, t)| h >= n || t >= n) {
            return Err(Error::Index(format!("relation ({h}, {t}) with {n} entities")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_positions.len()
    }

    /// Entity owning each input position, if any.
    pub fn entity_map(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.ids.len()];
        for (e, positions) in self.entity_positions.iter().enumerate() {
            for &p in positions {
                map[p] = Some(e);
            }
        }
        map
    }

    /// Position groups of every ordered entity pair, row-major; absent
    /// relations give empty groups.
    pub fn relation_groups(&self) -> Vec<Vec<usize>> {
        let n = self.num_entities();
        let mut groups = vec![Vec::new(); n * n];
        for (&(h, t), p) in &self.relation_positions {
            groups[h * n + t] = p.clone();
        }
        groups
    }
}

/// Intermediate states of one encoder layer.
pub struct LayerTrace {
    pub self_attention: Vec<Var>,
    /// Entity vectors fed to the structure-aware attention.
    pub entities: Option<Var>,
    pub structure_attention: Vec<Var>,
    /// Hidden states after the aggregation block (before feed-forward).
    pub fused: Var,
}

pub struct EncoderOutput {
    pub states: Var,
    pub layers: Vec<LayerTrace>,
}

/// Multi-head self-attention of encoder layer `layer` over already
/// normalized states; padded keys are masked out.
pub fn vanilla_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    layer: usize,
    num_heads: usize,
    h: Var,
    padding: &[bool],
) -> Result<crate::layers::AttentionOutput> {
    let rows = g.value(h).rows();
    if padding.len() != rows {
        return Err(Error::shape(format!("{} padding flags for {rows} rows", padding.len())));
    }
    let mask = key_padding_mask(rows, padding);
    multi_head_attention(g, params, &format!("{}.attn", enc_prefix(layer)), num_heads, h, h, &mask)
}

/// Mean-pools entity spans into `Z` (`|V| x d`) and relation spans into the
/// flattened pair tensor `Q` (`|V|^2 x d`, row `i * |V| + j`); pairs without a
/// relation get a zero row.
pub fn pool_units<T: Scalar>(g: &mut Graph<T>, h: Var, input: &EncoderInput) -> Result<(Var, Var)> {
    if input.entity_positions.iter().any(Vec::is_empty) {
        return Err(Error::EmptyPool);
    }
    let z = g.group_mean_pool(h, &input.entity_positions)?;
    let q = g.group_mean_pool(h, &input.relation_groups())?;
    Ok((z, q))
}

/// Relation-aware attention among entities. Per head:
/// `u_ij = (z_i Wqs)(z_j Wks + q_ij Wkr)^T / sqrt(d_k)`, `beta = softmax_j(u)`,
/// `out_i = sum_j beta_ij (z_j Wvs + q_ij Wvr)`; heads are concatenated.
pub fn structure_aware_attention<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    layer: usize,
    num_heads: usize,
    z: Var,
    q: Var,
) -> Result<(Var, Vec<Var>)> {
    let n = g.value(z).rows();
    if g.value(q).rows() != n * n {
        return Err(Error::shape("relation tensor must have |V|^2 rows"));
    }
    let d_k = g.value(z).cols() / num_heads;
    let inv_sqrt = T::one() / T::lit(d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    let mut betas = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let w = |which: &str| struct_name(layer, h, which);
        let wqs = g.param(params, &w("wqs"))?;
        let wks = g.param(params, &w("wks"))?;
        let wvs = g.param(params, &w("wvs"))?;
        let wkr = g.param(params, &w("wkr"))?;
        let wvr = g.param(params, &w("wvr"))?;
        let query = g.matmul(z, wqs)?;
        let key_ent = g.matmul(z, wks)?;
        let key_rel = g.matmul(q, wkr)?;
        let key_t = g.transpose(key_ent)?;
        let ent_scores = g.matmul(query, key_t)?;
        let rel_scores = g.rel_scores(query, key_rel)?;
        let scores = g.add(ent_scores, rel_scores)?;
        let scores = g.scale(scores, inv_sqrt);
        let beta = g.softmax(scores);
        let val_ent = g.matmul(z, wvs)?;
        let val_rel = g.matmul(q, wvr)?;
        let out_ent = g.matmul(beta, val_ent)?;
        let out_rel = g.rel_weighted_sum(beta, val_rel)?;
        heads.push(g.add(out_ent, out_rel)?);
        betas.push(beta);
    }
    Ok((g.concat(&heads, 1)?, betas))
}

/// Adds `z_tilde[e]` to every position of entity `e`; all other positions
/// are passed through unchanged.
pub fn residual_fuse<T: Scalar>(g: &mut Graph<T>, h: Var, z_tilde: Var, input: &EncoderInput) -> Result<Var> {
    g.add_rows_indexed(h, z_tilde, &input.entity_map())
}

/// Entity and relation vectors of the REL ablation: means of the
/// `rel.entity_table` / `rel.relation_table` rows of each unit's tokens.
fn learned_units<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    input: &EncoderInput,
) -> Result<(Var, Var)> {
    let span = &input.ids[..input.graph_len];
    let ent_table = g.param(params, "rel.entity_table")?;
    let rel_table = g.param(params, "rel.relation_table")?;
    let ent_rows = g.embedding(ent_table, span)?;
    let rel_rows = g.embedding(rel_table, span)?;
    pool_units_from(g, ent_rows, rel_rows, input)
}

fn pool_units_from<T: Scalar>(
    g: &mut Graph<T>,
    ent_rows: Var,
    rel_rows: Var,
    input: &EncoderInput,
) -> Result<(Var, Var)> {
    if input.entity_positions.iter().any(Vec::is_empty) {
        return Err(Error::EmptyPool);
    }
    let z = g.group_mean_pool(ent_rows, &input.entity_positions)?;
    let q = g.group_mean_pool(rel_rows, &input.relation_groups())?;
    Ok((z, q))
}

/// Full encoder pass; returns the final (normalized) hidden states, one row
/// per input position.
pub fn encode<T: Scalar>(g: &mut Graph<T>, net: Net<'_, T>, input: &EncoderInput) -> Result<EncoderOutput> {
    input.check()?;
    let cfg = &net.config.encoder;
    let eps = net.config.layer_norm_eps;
    let params = net.params;
    if input.len() > cfg.max_input_len {
        return Err(Error::Length(format!(
            "encoder input of {} tokens exceeds maximum {}",
            input.len(),
            cfg.max_input_len
        )));
    }
    let tokens = g.param(params, "embed.tokens")?;
    let positions = g.param(params, "embed.enc_pos")?;
    let tok = g.embedding(tokens, &input.ids)?;
    let pos_ids: Vec<usize> = (0..input.len()).collect();
    let pos = g.embedding(positions, &pos_ids)?;
    let mut x = g.add(tok, pos)?;

    let learned = if cfg.variant == EncoderVariant::Rel {
        Some(learned_units(g, params, input)?)
    } else {
        None
    };

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let prefix = enc_prefix(l);
        let normed = layer_norm(g, params, &format!("{prefix}.ln1"), x, eps)?;
        let attn = vanilla_self_attention(g, params, l, cfg.num_heads, normed, &input.padding)?;
        let mut h = g.add(x, attn.output)?;
        let mut entities = None;
        let mut structure_attention = Vec::new();
        let units = match cfg.variant {
            EncoderVariant::Seq => None,
            EncoderVariant::Joint => Some(pool_units(g, h, input)?),
            EncoderVariant::Rel => learned,
        };
        if let Some((z, q)) = units {
            let (z_tilde, betas) = structure_aware_attention(g, params, l, cfg.num_heads, z, q)?;
            h = residual_fuse(g, h, z_tilde, input)?;
            entities = Some(z);
            structure_attention = betas;
        }
        let normed = layer_norm(g, params, &format!("{prefix}.ln2"), h, eps)?;
        let ff = feed_forward(g, params, &format!("{prefix}.ffn"), normed)?;
        x = g.add(h, ff)?;
        layers.push(LayerTrace {
            self_attention: attn.weights,
            entities,
            structure_attention,
            fused: h,
        });
    }
    let states = layer_norm(g, params, "enc.final_ln", x, eps)?;
    Ok(EncoderOutput { states, layers })
}
