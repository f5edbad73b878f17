use graphtext_core::autograd::Graph;
use graphtext_core::checkpoint::{load_checkpoint, save_checkpoint};
use graphtext_core::decoder::decode_train;
use graphtext_core::encoder::{encode, EncoderInput};
use graphtext_core::graph_data::linearize;
use graphtext_core::tensor::{ParamStore, Tensor};
use graphtext_core::toy::{synthetic_corpus, synthetic_vocab, toy_model};
use graphtext_core::training::*;
use graphtext_core::{EncoderVariant, Model};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook Adam on a flat vector.
fn reference_adam(w: &mut [f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) {
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        for k in 0..w.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let mh = m[k] / (1.0 - b1.powi(t));
            let vh = v[k] / (1.0 - b2.powi(t));
            w[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn adam_matches_reference(seed in any::<u64>(), steps in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..10).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(vec![4], init[..4].to_vec()).unwrap()).unwrap();
        store.insert("b", Tensor::new(vec![2, 3], init[4..].to_vec()).unwrap()).unwrap();
        let mut state = AdamState::new(&store);
        for g in &grads {
            store.get_mut("a").unwrap().grad = Some(g[..4].to_vec());
            store.get_mut("b").unwrap().grad = Some(g[4..].to_vec());
            adam_step(&mut store, &mut state, 0.01, (0.9, 0.999), 1e-8).unwrap();
        }
        let mut expected = init.clone();
        reference_adam(&mut expected, &grads, 0.01, 0.9, 0.999, 1e-8);
        let got: Vec<f64> = store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect();
        for (a, b) in got.iter().zip(&expected) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_the_norm(seed in any::<u64>(), max in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert("x", Tensor::<f64>::zeros(&[3, 4])).unwrap();
        store.get_mut("x").unwrap().grad = Some((0..12).map(|_| rng.random_range(-10.0..10.0)).collect());
        let before = store.grad_norm();
        let reported = store.clip_grad_norm(max);
        prop_assert_eq!(reported, before);
        prop_assert!(store.grad_norm() <= max + 1e-12);
        if before <= max {
            prop_assert_eq!(store.grad_norm(), before);
        }
    }
}

fn quick(task: Task, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        epochs: 2,
        seed,
        task,
        ..TrainConfig::default()
    }
}

#[test]
fn single_pair_single_epoch_is_one_step() {
    let vocab = synthetic_vocab();
    let mut model = toy_model::<f64>(&vocab, EncoderVariant::Joint, 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        ..quick(Task::Finetune, 0)
    };
    let cfg = TrainConfig { epochs: 1, ..cfg };
    let log = train(&synthetic_corpus(1), &mut model, &vocab, &cfg, None).unwrap();
    assert_eq!(log.records.len(), 1);
    assert_eq!(log.records[0].step, 1);
}

#[test]
fn step_count_follows_batches_and_cap() {
    let vocab = synthetic_vocab();
    let corpus = synthetic_corpus(5);
    let mut model = toy_model::<f64>(&vocab, EncoderVariant::Seq, 0).unwrap();
    let log = train(&corpus, &mut model, &vocab, &quick(Task::Finetune, 1), None).unwrap();
    assert_eq!(log.records.len(), 6);
    let capped = TrainConfig {
        max_steps: Some(4),
        ..quick(Task::Finetune, 1)
    };
    let log = train(&corpus, &mut model, &vocab, &capped, None).unwrap();
    assert_eq!(log.records.len(), 4);
}

#[test]
fn same_seed_same_log_and_weights() {
    let vocab = synthetic_vocab();
    let corpus = synthetic_corpus(6);
    let run = |seed| {
        let mut model = toy_model::<f64>(&vocab, EncoderVariant::Joint, 4).unwrap();
        let log = train(&corpus, &mut model, &vocab, &quick(Task::Pretrain, seed), None).unwrap();
        (log.records, model)
    };
    let (a, ma) = run(7);
    let (b, mb) = run(7);
    assert_eq!(a, b);
    for ((_, p), (_, q)) in ma.params.iter().zip(mb.params.iter()) {
        assert_eq!(p.value, q.value);
    }
    let (c, _) = run(8);
    assert_ne!(a, c);
}

#[test]
fn finetuning_lowers_the_loss() {
    let vocab = synthetic_vocab();
    let corpus = synthetic_corpus(4);
    let mut model = toy_model::<f64>(&vocab, EncoderVariant::Joint, 1).unwrap();
    let before = corpus_token_loss(&model, &vocab, &corpus).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 10,
        ..quick(Task::Finetune, 0)
    };
    train(&corpus, &mut model, &vocab, &cfg, None).unwrap();
    assert!(corpus_token_loss(&model, &vocab, &corpus).unwrap() < before);
}

#[test]
fn writes_log_and_epoch_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = synthetic_vocab();
    let mut model = toy_model::<f64>(&vocab, EncoderVariant::Joint, 1).unwrap();
    let log = train(&synthetic_corpus(3), &mut model, &vocab, &quick(Task::Pretrain, 0), Some(dir.path())).unwrap();
    let lines = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), log.records.len());
    let first: StepRecord = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first, log.records[0]);
    for epoch in 1..=2 {
        assert!(dir.path().join(format!("checkpoints/epoch-{epoch}/params.bin")).exists());
    }
}

#[test]
fn early_stop_checkpoints_current_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = synthetic_vocab();
    let mut model = toy_model::<f64>(&vocab, EncoderVariant::Seq, 1).unwrap();
    let log = train_with(&synthetic_corpus(6), &mut model, &vocab, &quick(Task::Finetune, 0), Some(dir.path()), |r, _| {
        r.step < 2
    })
    .unwrap();
    assert_eq!(log.records.len(), 2);
    assert!(dir.path().join("checkpoints/epoch-1").exists());
    assert!(!dir.path().join("checkpoints/epoch-2").exists());
}

#[test]
fn empty_corpus_is_rejected() {
    let vocab = synthetic_vocab();
    let mut model = toy_model::<f64>(&vocab, EncoderVariant::Seq, 1).unwrap();
    assert!(train(&[], &mut model, &vocab, &quick(Task::Finetune, 0), None).is_err());
}

fn forward(model: &Model) -> Tensor<f64> {
    let vocab = synthetic_vocab();
    let pair = &synthetic_corpus(3)[2];
    let lin = linearize(&pair.graph).unwrap();
    let input = EncoderInput::from_graph(&vocab, &lin, &lin.tokens, None).unwrap();
    let mut g = Graph::new();
    let enc = encode(&mut g, model.net(), &input).unwrap();
    let out = decode_train(&mut g, model.net(), &[1, 9, 12, 15], enc.states, &input.padding).unwrap();
    g.value(out.logits).clone()
}

#[test]
fn checkpoint_reproduces_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = synthetic_vocab();
    for variant in [EncoderVariant::Seq, EncoderVariant::Joint, EncoderVariant::Rel] {
        let model = toy_model::<f64>(&vocab, variant, 5).unwrap();
        let path = dir.path().join(format!("{variant:?}"));
        save_checkpoint(&model.params, &model.config, &vocab, &path).unwrap();
        let (loaded, v2) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(v2, vocab);
        let (a, b) = (forward(&model), forward(&loaded));
        let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
