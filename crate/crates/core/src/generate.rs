//! Greedy and beam-search decoding with length penalty.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::decoder::decode_train;
use crate::encoder::{encode, EncoderInput};
use crate::error::{Error, Result};
use crate::graph_data::{linearize, KnowledgeGraph};
use crate::model::Net;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{special, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Exponent `p` of the length normalization `score = logp / len^p`.
    pub length_penalty: f64,
    /// Maximum number of generated tokens, end-of-sequence included.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            length_penalty: 1.0,
            max_len: 64,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 || !(self.length_penalty >= 0.0) {
            return Err(Error::Config(
                "beam_size and max_len must be >= 1 and length_penalty >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Next-token distribution given the tokens generated so far (the start
/// token is implicit).
pub trait StepModel {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without the end-of-sequence token.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Number of scored tokens (including end-of-sequence when emitted).
    pub len: usize,
    pub score: f64,
}

pub fn penalized_score(log_prob: f64, len: usize, length_penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(length_penalty)
}

fn finish(tokens: &[usize], log_prob: f64, eos: bool, length_penalty: f64) -> Hypothesis {
    let len = tokens.len() + usize::from(eos);
    Hypothesis {
        tokens: tokens.to_vec(),
        log_prob,
        len,
        score: penalized_score(log_prob, len, length_penalty),
    }
}

fn better(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Repeated argmax (lowest id on ties) until end-of-sequence or `max_len`.
pub fn greedy(model: &impl StepModel, max_len: usize, eos: usize, length_penalty: f64) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = model.next_log_probs(&tokens)?;
        let (best, &best_lp) = lp
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, &f64)>, (i, v)| match acc {
                Some((_, bv)) if *bv >= *v => acc,
                _ => Some((i, v)),
            })
            .ok_or_else(|| Error::Usage("empty next-token distribution".into()))?;
        log_prob += best_lp;
        if best == eos {
            return Ok(finish(&tokens, log_prob, true, length_penalty));
        }
        tokens.push(best);
    }
    Ok(finish(&tokens, log_prob, false, length_penalty))
}

/// Beam search ranked by summed log-probability; finished hypotheses are
/// compared by `logp / len^length_penalty`. Search stops once `beam_size`
/// hypotheses have finished or `max_len` tokens were generated, in which
/// case the surviving beams are scored as they are. Ties go to the
/// lexicographically smaller token sequence. For `beam_size > 1` the greedy
/// hypothesis competes as well, so the result never scores below it.
pub fn beam_search(model: &impl StepModel, cfg: &BeamConfig, eos: usize) -> Result<Hypothesis> {
    cfg.validate()?;
    if cfg.beam_size == 1 {
        return greedy(model, cfg.max_len, eos, cfg.length_penalty);
    }
    let mut finished = vec![greedy(model, cfg.max_len, eos, cfg.length_penalty)?];
    let mut finished_by_search = 0;
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..cfg.max_len {
        let mut candidates: Vec<(Vec<usize>, f64)> = Vec::new();
        for (tokens, lp) in &live {
            let next = model.next_log_probs(tokens)?;
            for (t, &l) in next.iter().enumerate() {
                if l.is_finite() {
                    let mut seq = tokens.clone();
                    seq.push(t);
                    candidates.push((seq, lp + l));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        let mut next_live = Vec::with_capacity(cfg.beam_size);
        for (rank, (seq, lp)) in candidates.into_iter().enumerate() {
            if next_live.len() == cfg.beam_size {
                break;
            }
            if *seq.last().expect("non-empty") == eos {
                if rank < cfg.beam_size {
                    finished.push(finish(&seq[..seq.len() - 1], lp, true, cfg.length_penalty));
                    finished_by_search += 1;
                }
            } else {
                next_live.push((seq, lp));
            }
        }
        live = next_live;
        if live.is_empty() || finished_by_search >= cfg.beam_size {
            break;
        }
    }
    if finished_by_search < cfg.beam_size {
        finished.extend(
            live.iter()
                .filter(|(seq, _)| seq.len() == cfg.max_len)
                .map(|(seq, lp)| finish(seq, *lp, false, cfg.length_penalty)),
        );
    }
    finished.sort_by(better);
    Ok(finished.swap_remove(0))
}

/// Decoder-side [`StepModel`] over fixed encoder states.
pub struct TransformerStepper<'a, T> {
    net: Net<'a, T>,
    memory: Tensor<T>,
    padding: Vec<bool>,
}

impl<'a, T: Scalar> TransformerStepper<'a, T> {
    pub fn new(net: Net<'a, T>, input: &EncoderInput) -> Result<Self> {
        let mut g = Graph::new();
        let out = encode(&mut g, net, input)?;
        Ok(Self {
            net,
            memory: g.value(out.states).clone(),
            padding: input.padding.clone(),
        })
    }
}

impl<T: Scalar> StepModel for TransformerStepper<'_, T> {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let memory = g.constant(self.memory.clone());
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(special::BOS_ID);
        ids.extend_from_slice(prefix);
        let out = decode_train(&mut g, self.net, &ids, memory, &self.padding)?;
        let last = g.slice(out.logits, 0, ids.len() - 1, ids.len())?;
        let lp = g.log_softmax(last);
        Ok(g.value(lp).data().iter().map(|x| x.as_f64()).collect())
    }
}

/// Generates a text for `graph` from its linearization alone.
pub fn generate_text<T: Scalar>(
    net: Net<'_, T>,
    vocab: &Vocabulary,
    graph: &KnowledgeGraph,
    beam: &BeamConfig,
) -> Result<Vec<String>> {
    let lin = linearize(graph)?;
    let input = EncoderInput::from_graph(vocab, &lin, &lin.tokens, None)?;
    let stepper = TransformerStepper::new(net, &input)?;
    let cfg = BeamConfig {
        max_len: beam.max_len.min(net.config.decoder.max_output_len),
        ..beam.clone()
    };
    let hyp = beam_search(&stepper, &cfg, special::EOS_ID)?;
    Ok(vocab.decode(&hyp.tokens))
}
