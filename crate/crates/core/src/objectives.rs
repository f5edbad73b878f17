//! Pre-training and fine-tuning losses.
//!
//! * text reconstruction: encoder reads `[graph ; <SEP> ; masked text]`, the
//!   decoder reproduces the full text;
//! * graph reconstruction: encoder reads `[masked graph ; <SEP> ; text]` and a
//!   tied vocabulary head predicts the original token at every masked graph
//!   position;
//! * alignment: optimal-transport cost between pooled graph-unit states of
//!   the encoder and the decoder's hidden states of the text, under cosine
//!   cost, with the plan held constant;
//! * fine-tuning: encoder reads the graph alone, the decoder produces the
//!   text.
//!
//! Token-level losses average over predicted positions. The decoder is fed
//! `<BOS> x_1 .. x_n` and predicts `x_1 .. x_n <EOS>`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::{decode_train, tied_logits};
use crate::encoder::{encode, EncoderInput};
use crate::error::{Error, Result};
use crate::graph_data::{linearize, unit_sequence, GraphTextPair};
use crate::masking::{mask_graph, mask_text, MaskedGraph, MaskedText, MaskingConfig};
use crate::model::Net;
use crate::ot::{ipot, uniform, OtConfig, TransportPlan};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{special, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub text: f64,
    pub graph: f64,
    pub ot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            text: 1.0,
            graph: 1.0,
            ot: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.text, self.graph, self.ot].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything the pre-training objective needs besides the model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainSettings {
    pub masking: MaskingConfig,
    pub ot: OtConfig,
    pub weights: LossWeights,
}

/// Component values of one combined pre-training loss.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub l_text: f64,
    pub l_graph: f64,
    pub l_ot: f64,
    pub weights: LossWeights,
    /// Weighted sum, differentiable.
    pub total: Var,
    pub total_value: f64,
}

/// Decoder inputs `<BOS> x` and targets `x <EOS>`.
pub fn teacher_forcing(vocab: &Vocabulary, text: &[String]) -> (Vec<usize>, Vec<usize>) {
    let ids = vocab.encode(text);
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(special::BOS_ID);
    input.extend_from_slice(&ids);
    let mut targets = ids;
    targets.push(special::EOS_ID);
    (input, targets)
}

fn text_generation_loss<T: Scalar>(
    g: &mut Graph<T>,
    net: Net<'_, T>,
    vocab: &Vocabulary,
    input: &EncoderInput,
    text: &[String],
) -> Result<Var> {
    let enc = encode(g, net, input)?;
    let (dec_in, targets) = teacher_forcing(vocab, text);
    let out = decode_train(g, net, &dec_in, enc.states, &input.padding)?;
    g.cross_entropy(out.logits, &targets, special::PAD_ID)
}

pub fn loss_text_reconstruction<T: Scalar>(
    g: &mut Graph<T>,
    net: Net<'_, T>,
    vocab: &Vocabulary,
    pair: &GraphTextPair,
    masked: &MaskedText,
) -> Result<Var> {
    let lin = linearize(&pair.graph)?;
    let input = EncoderInput::from_graph(vocab, &lin, &lin.tokens, Some(&masked.corrupted))?;
    text_generation_loss(g, net, vocab, &input, &pair.text)
}

/// Zero (with zero gradient) when nothing was masked.
pub fn loss_graph_reconstruction<T: Scalar>(
    g: &mut Graph<T>,
    net: Net<'_, T>,
    vocab: &Vocabulary,
    pair: &GraphTextPair,
    masked: &MaskedGraph,
) -> Result<Var> {
    let lin = linearize(&pair.graph)?;
    if masked.original != lin.tokens {
        return Err(Error::Usage("masked graph does not belong to this pair".into()));
    }
    let input = EncoderInput::from_graph(vocab, &lin, &masked.corrupted, Some(&pair.text))?;
    let enc = encode(g, net, &input)?;
    let graph_states = g.slice(enc.states, 0, 0, lin.len())?;
    let logits = tied_logits(g, net, graph_states)?;
    let targets: Vec<usize> = masked
        .original
        .iter()
        .zip(&masked.indicator)
        .map(|(t, &m)| if m { vocab.id(t) } else { special::PAD_ID })
        .collect();
    g.cross_entropy(logits, &targets, special::PAD_ID)
}

/// `sum_ij T_ij C_ij` with `C` the cosine cost between rows of `graph_units`
/// and `text_states`. `T` is solved from the current cost unless `frozen`
/// is given, and never receives gradient.
pub fn ot_alignment_cost<T: Scalar>(
    g: &mut Graph<T>,
    graph_units: Var,
    text_states: Var,
    cfg: &OtConfig,
    frozen: Option<&Tensor<T>>,
) -> Result<(Var, TransportPlan<T>)> {
    let cost = g.cosine_cost(graph_units, text_states)?;
    let c = g.value(cost).clone();
    let (p, q) = (c.rows(), c.cols());
    let plan = match frozen {
        Some(t) => {
            if t.shape() != c.shape() {
                return Err(Error::shape("frozen plan does not match the cost matrix"));
            }
            TransportPlan {
                plan: t.clone(),
                a: uniform(p),
                b: uniform(q),
            }
        }
        None => ipot(&c, &uniform(p), &uniform(q), cfg)?,
    };
    let t = g.constant(plan.plan.clone());
    let weighted = g.mul(cost, t)?;
    Ok((g.sum(weighted), plan))
}

pub fn loss_ot_alignment<T: Scalar>(
    g: &mut Graph<T>,
    net: Net<'_, T>,
    vocab: &Vocabulary,
    pair: &GraphTextPair,
    cfg: &OtConfig,
    frozen: Option<&Tensor<T>>,
) -> Result<(Var, TransportPlan<T>)> {
    let lin = linearize(&pair.graph)?;
    let input = EncoderInput::from_graph(vocab, &lin, &lin.tokens, None)?;
    let enc = encode(g, net, &input)?;
    let groups: Vec<Vec<usize>> = unit_sequence(&pair.graph)
        .into_iter()
        .map(|u| lin.positions(u).to_vec())
        .collect();
    let graph_units = g.group_mean_pool(enc.states, &groups)?;
    let (dec_in, _) = teacher_forcing(vocab, &pair.text);
    let out = decode_train(g, net, &dec_in, enc.states, &input.padding)?;
    let text_states = g.slice(out.hidden, 0, 1, dec_in.len())?;
    ot_alignment_cost(g, graph_units, text_states, cfg, frozen)
}

pub fn loss_finetune<T: Scalar>(
    g: &mut Graph<T>,
    net: Net<'_, T>,
    vocab: &Vocabulary,
    pair: &GraphTextPair,
) -> Result<Var> {
    let lin = linearize(&pair.graph)?;
    let input = EncoderInput::from_graph(vocab, &lin, &lin.tokens, None)?;
    text_generation_loss(g, net, vocab, &input, &pair.text)
}

/// Draws both corruptions (text first, then graph) from `rng`.
pub fn sample_masks(
    pair: &GraphTextPair,
    masking: &MaskingConfig,
    rng: &mut impl Rng,
) -> Result<(MaskedText, MaskedGraph)> {
    let text = mask_text(pair, rng, masking.text_entity, masking.text_other);
    let lin = linearize(&pair.graph)?;
    let graph = mask_graph(&lin, rng, masking.graph_entity, masking.graph_relation);
    Ok((text, graph))
}

/// Weighted sum of the three pre-training losses on one pair, each from its
/// own forward pass. Masks are drawn even for tasks whose weight is zero, so
/// the random stream does not depend on the weights.
pub fn combined_pretrain_loss<T: Scalar>(
    g: &mut Graph<T>,
    net: Net<'_, T>,
    vocab: &Vocabulary,
    pair: &GraphTextPair,
    rng: &mut impl Rng,
    settings: &PretrainSettings,
) -> Result<LossBundle> {
    settings.weights.validate()?;
    let (masked_text, masked_graph) = sample_masks(pair, &settings.masking, rng)?;
    let w = settings.weights;
    // A zero-weighted task is skipped entirely and reported as 0.
    let mut parts = Vec::with_capacity(3);
    let mut values = [0.0; 3];
    if w.text > 0.0 {
        let l = loss_text_reconstruction(g, net, vocab, pair, &masked_text)?;
        values[0] = g.value(l).item().as_f64();
        parts.push(g.scale(l, T::lit(w.text)));
    }
    if w.graph > 0.0 {
        let l = loss_graph_reconstruction(g, net, vocab, pair, &masked_graph)?;
        values[1] = g.value(l).item().as_f64();
        parts.push(g.scale(l, T::lit(w.graph)));
    }
    if w.ot > 0.0 {
        let (l, _) = loss_ot_alignment(g, net, vocab, pair, &settings.ot, None)?;
        values[2] = g.value(l).item().as_f64();
        parts.push(g.scale(l, T::lit(w.ot)));
    }
    let mut total = match parts.first() {
        Some(&first) => first,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    for &p in parts.iter().skip(1) {
        total = g.add(total, p)?;
    }
    let [l_text, l_graph, l_ot] = values;
    Ok(LossBundle {
        l_text,
        l_graph,
        l_ot,
        weights: w,
        total,
        total_value: g.value(total).item().as_f64(),
    })
}
