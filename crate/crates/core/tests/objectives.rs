use graphtext_core::autograd::Graph;
use graphtext_core::graph_data::{linearize, GraphTextPair, KnowledgeGraph};
use graphtext_core::masking::{mask_graph, MaskingConfig};
use graphtext_core::model::{Model, ModelConfig};
use graphtext_core::objectives::*;
use graphtext_core::ot::OtConfig;
use graphtext_core::tensor::Tensor;
use graphtext_core::tokenizer::Vocabulary;
use graphtext_core::toy::{synthetic_corpus, synthetic_pair, synthetic_vocab, toy_config, toy_model};
use graphtext_core::EncoderVariant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pair whose vocabulary has exactly 16 tokens.
fn sixteen() -> (GraphTextPair, Vocabulary) {
    let graph = KnowledgeGraph::new(vec!["a".into(), "b".into()], [(0, "r", 1)]).unwrap();
    let pair = GraphTextPair::new(graph, "a r b x y z w").unwrap();
    let vocab = Vocabulary::build(std::slice::from_ref(&pair), 1).unwrap();
    assert_eq!(vocab.len(), 16);
    (pair, vocab)
}

/// Zero token embeddings make every tied logit zero.
fn uniform_model(vocab: &Vocabulary) -> Model<f64> {
    let cfg: ModelConfig = toy_config(vocab.len(), EncoderVariant::Joint);
    let mut m = Model::seeded(cfg, 1).unwrap();
    let tokens = m.params.get_mut("embed.tokens").unwrap();
    tokens.value.data_mut().fill(0.0);
    m
}

#[test]
fn uniform_logits_give_log_vocab() {
    let (pair, vocab) = sixteen();
    let m = uniform_model(&vocab);
    let mut g = Graph::new();
    let l = loss_finetune(&mut g, m.net(), &vocab, &pair).unwrap();
    assert!((g.value(l).item() - 16f64.ln()).abs() < 1e-12);

    let lin = linearize(&pair.graph).unwrap();
    let masked = mask_graph(&lin, &mut ChaCha8Rng::seed_from_u64(0), 1.0, 1.0);
    let mut g = Graph::new();
    let l = loss_graph_reconstruction(&mut g, m.net(), &vocab, &pair, &masked).unwrap();
    assert!((g.value(l).item() - 16f64.ln()).abs() < 1e-12);
}

#[test]
fn unmasked_graph_gives_zero_loss_and_gradient() {
    let vocab = synthetic_vocab();
    let mut m = toy_model::<f64>(&vocab, EncoderVariant::Joint, 0).unwrap();
    let pair = synthetic_pair(0);
    let lin = linearize(&pair.graph).unwrap();
    let masked = mask_graph(&lin, &mut ChaCha8Rng::seed_from_u64(0), 0.0, 0.0);
    let mut g = Graph::new();
    let l = loss_graph_reconstruction(&mut g, m.net(), &vocab, &pair, &masked).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    g.backward_to(l, &mut m.params).unwrap();
    assert_eq!(m.params.grad_norm(), 0.0);
}

#[test]
fn identical_embeddings_have_zero_alignment_cost() {
    let mut g = Graph::<f64>::new();
    let row = Tensor::randn(&[1, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let r = row.row(0).to_vec();
    let hg = g.constant(Tensor::from_rows(&[r.clone(), r.clone(), r.clone()]).unwrap());
    let s = g.constant(Tensor::from_rows(&[r.clone(), r]).unwrap());
    let (cost, plan) = ot_alignment_cost(&mut g, hg, s, &OtConfig::default(), None).unwrap();
    assert!(g.value(cost).item().abs() < 1e-12);
    assert_eq!(plan.plan.shape(), &[3, 2]);
}

#[test]
fn losses_are_bounded_and_nonnegative() {
    let vocab = synthetic_vocab();
    let settings = PretrainSettings::default();
    for (i, pair) in synthetic_corpus(6).iter().enumerate() {
        let m = toy_model::<f64>(&vocab, EncoderVariant::Joint, i as u64).unwrap();
        let mut g = Graph::new();
        let b = combined_pretrain_loss(&mut g, m.net(), &vocab, pair, &mut ChaCha8Rng::seed_from_u64(i as u64), &settings)
            .unwrap();
        assert!(b.l_text >= 0.0 && b.l_graph >= 0.0);
        assert!((0.0..=2.0).contains(&b.l_ot), "{}", b.l_ot);
        assert!(b.total_value.is_finite());
    }
}

#[test]
fn total_is_weighted_sum_of_recomputed_components() {
    let vocab = synthetic_vocab();
    let m = toy_model::<f64>(&vocab, EncoderVariant::Joint, 3).unwrap();
    let pair = synthetic_pair(7);
    let settings = PretrainSettings {
        weights: LossWeights {
            text: 0.5,
            graph: 2.0,
            ot: 3.0,
        },
        ..PretrainSettings::default()
    };
    let mut g = Graph::new();
    let bundle =
        combined_pretrain_loss(&mut g, m.net(), &vocab, &pair, &mut ChaCha8Rng::seed_from_u64(42), &settings).unwrap();

    let (mt, mg) = sample_masks(&pair, &settings.masking, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let mut g = Graph::new();
    let t = loss_text_reconstruction(&mut g, m.net(), &vocab, &pair, &mt).unwrap();
    let gr = loss_graph_reconstruction(&mut g, m.net(), &vocab, &pair, &mg).unwrap();
    let (o, _) = loss_ot_alignment(&mut g, m.net(), &vocab, &pair, &settings.ot, None).unwrap();
    let (t, gr, o) = (g.value(t).item(), g.value(gr).item(), g.value(o).item());
    assert_eq!(bundle.l_text, t);
    assert_eq!(bundle.l_graph, gr);
    assert_eq!(bundle.l_ot, o);
    assert!((bundle.total_value - (0.5 * t + 2.0 * gr + 3.0 * o)).abs() < 1e-12);
}

#[test]
fn weight_selection() {
    let vocab = synthetic_vocab();
    let mut m = toy_model::<f64>(&vocab, EncoderVariant::Joint, 3).unwrap();
    let pair = synthetic_pair(1);
    let run = |m: &Model<f64>, w: LossWeights| {
        let settings = PretrainSettings {
            weights: w,
            ..PretrainSettings::default()
        };
        let mut g = Graph::new();
        let b = combined_pretrain_loss(&mut g, m.net(), &vocab, &pair, &mut ChaCha8Rng::seed_from_u64(5), &settings)
            .unwrap();
        (g, b)
    };
    let (_, only_text) = run(&m, LossWeights { text: 1.0, graph: 0.0, ot: 0.0 });
    assert_eq!(only_text.total_value, only_text.l_text);
    assert_eq!((only_text.l_graph, only_text.l_ot), (0.0, 0.0));

    let (mut g, none) = run(&m, LossWeights { text: 0.0, graph: 0.0, ot: 0.0 });
    assert_eq!(none.total_value, 0.0);
    g.backward_to(none.total, &mut m.params).unwrap();
    assert_eq!(m.params.grad_norm(), 0.0);
}

#[test]
fn combined_loss_is_bit_deterministic() {
    let vocab = synthetic_vocab();
    let m = toy_model::<f64>(&vocab, EncoderVariant::Joint, 8).unwrap();
    let pair = synthetic_pair(9);
    let settings = PretrainSettings::default();
    let value = || {
        let mut g = Graph::new();
        combined_pretrain_loss(&mut g, m.net(), &vocab, &pair, &mut ChaCha8Rng::seed_from_u64(9), &settings)
            .unwrap()
            .total_value
            .to_bits()
    };
    assert_eq!(value(), value());
}

#[test]
fn zero_masking_is_well_defined() {
    let vocab = synthetic_vocab();
    let m = toy_model::<f64>(&vocab, EncoderVariant::Joint, 8).unwrap();
    let settings = PretrainSettings {
        masking: MaskingConfig {
            text_entity: 0.0,
            text_other: 0.0,
            graph_entity: 0.0,
            graph_relation: 0.0,
        },
        ..PretrainSettings::default()
    };
    let mut g = Graph::new();
    let b = combined_pretrain_loss(&mut g, m.net(), &vocab, &synthetic_pair(2), &mut ChaCha8Rng::seed_from_u64(1), &settings)
        .unwrap();
    assert!(b.l_text.is_finite() && b.l_text > 0.0);
    assert_eq!(b.l_graph, 0.0);
}

#[test]
fn teacher_forcing_shifts_by_one() {
    let vocab = synthetic_vocab();
    let pair = synthetic_pair(0);
    let (input, targets) = teacher_forcing(&vocab, &pair.text);
    assert_eq!(input.len(), pair.n() + 1);
    assert_eq!(input[0], 1);
    assert_eq!(&input[1..], &targets[..pair.n()]);
    assert_eq!(*targets.last().unwrap(), 2);
}
