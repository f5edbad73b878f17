//! Small deterministic fixtures: a toy model configuration, a synthetic
//! corpus that a toy model can memorize, and gradient checks of every loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph_data::{GraphTextPair, KnowledgeGraph};
use crate::model::{DecoderConfig, EncoderConfig, EncoderVariant, Model, ModelConfig, Net};
use crate::objectives::{
    loss_finetune, loss_graph_reconstruction, loss_ot_alignment, loss_text_reconstruction, sample_masks,
    PretrainSettings,
};
use crate::scalar::Scalar;
use crate::tokenizer::Vocabulary;

const PEOPLE: [&str; 10] = [
    "alice", "bruno", "chen", "dana", "emil", "farah", "goran", "hana", "ivan", "jun",
];
const CITIES: [&str; 6] = ["paris", "lima", "oslo", "kyiv", "quito", "hanoi"];
const FIRMS: [&str; 6] = ["acme", "initech", "umbrella", "globex", "hooli", "soylent"];

/// Two encoder and two decoder layers, width 16, two heads.
pub fn toy_config(vocab_size: usize, variant: EncoderVariant) -> ModelConfig {
    ModelConfig::new(
        vocab_size,
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_input_len: 40,
            variant,
        },
        DecoderConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_output_len: 16,
        },
    )
}

/// Pair `i` of the synthetic corpus: three entities, two triples and an
/// eight-token text.
pub fn synthetic_pair(i: usize) -> GraphTextPair {
    let person = PEOPLE[i % PEOPLE.len()];
    let city = CITIES[(i * 5 + 1) % CITIES.len()];
    let firm = FIRMS[(i * 7 + 2) % FIRMS.len()];
    let (r1, r2, text) = if i.is_multiple_of(2) {
        ("born in", "works for", format!("{person} born in {city} and works for {firm}"))
    } else {
        ("lives in", "leads", format!("{person} lives in {city} and now leads {firm}"))
    };
    let graph = KnowledgeGraph::new(
        vec![person.into(), city.into(), firm.into()],
        [(0, r1, 1), (0, r2, 2)],
    )
    .expect("synthetic graph is valid");
    GraphTextPair::new(graph, &text).expect("synthetic text is non-empty")
}

/// The first `n` synthetic pairs (all distinct for `n <= 20`).
pub fn synthetic_corpus(n: usize) -> Vec<GraphTextPair> {
    (0..n).map(synthetic_pair).collect()
}

/// Vocabulary of the full 20-pair synthetic corpus.
pub fn synthetic_vocab() -> Vocabulary {
    Vocabulary::build(&synthetic_corpus(20), 1).expect("corpus is non-empty")
}

pub fn toy_model<T: Scalar>(vocab: &Vocabulary, variant: EncoderVariant, seed: u64) -> Result<Model<T>> {
    Model::seeded(toy_config(vocab.len(), variant), seed)
}

/// Finite-difference checks of the text, graph, alignment (plan frozen at
/// the unperturbed parameters) and fine-tuning losses on `pair`. Masks are
/// drawn once from `seed`.
pub fn check_all_losses<T: Scalar>(
    model: &mut Model<T>,
    vocab: &Vocabulary,
    pair: &GraphTextPair,
    settings: &PretrainSettings,
    opts: GradCheckOptions,
    seed: u64,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (masked_text, masked_graph) = sample_masks(pair, &settings.masking, &mut rng)?;
    let plan = {
        let mut g = Graph::new();
        loss_ot_alignment(&mut g, model.net(), vocab, pair, &settings.ot, None)?.1.plan
    };
    let config = model.config.clone();
    let params = &mut model.params;
    let mut out = Vec::with_capacity(4);
    out.push((
        "text",
        grad_check(params, opts, |g, p| {
            loss_text_reconstruction(g, Net::new(&config, p), vocab, pair, &masked_text)
        })?,
    ));
    out.push((
        "graph",
        grad_check(params, opts, |g, p| {
            loss_graph_reconstruction(g, Net::new(&config, p), vocab, pair, &masked_graph)
        })?,
    ));
    out.push((
        "ot",
        grad_check(params, opts, |g, p| {
            Ok(loss_ot_alignment(g, Net::new(&config, p), vocab, pair, &settings.ot, Some(&plan))?.0)
        })?,
    ));
    out.push((
        "finetune",
        grad_check(params, opts, |g, p| loss_finetune(g, Net::new(&config, p), vocab, pair))?,
    ));
    Ok(out)
}
