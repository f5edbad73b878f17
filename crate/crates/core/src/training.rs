//! Optimization loop: Adam with bias correction, linear warmup/decay,
//! global-norm clipping, seeded shuffling and per-epoch checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::graph_data::GraphTextPair;
use crate::model::Model;
use crate::objectives::{combined_pretrain_loss, loss_finetune, PretrainSettings};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the number of optimizer steps (and the schedule length).
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub task: Task,
    pub pretrain: PretrainSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            warmup_ratio: 0.1,
            max_grad_norm: 1.0,
            adam_eps: 1e-8,
            adam_betas: (0.9, 0.999),
            batch_size: 8,
            epochs: 1,
            max_steps: None,
            seed: 0,
            task: Task::Finetune,
            pretrain: PretrainSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if !(self.max_grad_norm > 0.0) || !(self.adam_eps > 0.0) {
            return bad("max_grad_norm and adam_eps must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return bad("batch_size, epochs and max_steps must be positive");
        }
        let m = &self.pretrain.masking;
        if [m.text_entity, m.text_other, m.graph_entity, m.graph_relation]
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return bad("masking probabilities must lie in [0, 1]");
        }
        self.pretrain.ot.validate()?;
        self.pretrain.weights.validate()
    }

    pub fn steps_per_epoch(&self, corpus_len: usize) -> usize {
        corpus_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, corpus_len: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(corpus_len);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Linear warmup from 0 to the peak rate over `ceil(warmup_ratio * total)`
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.learning_rate;
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let warmup = (cfg.warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Vec<T>> {
            store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect()
        };
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update; gradients are cleared afterwards.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::Usage("optimizer state does not match the parameter store".into()));
    }
    if let Some((name, _)) = store.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::Usage(format!("parameter {name} has no gradient")));
    }
    state.step += 1;
    let (b1, b2) = (T::lit(betas.0), T::lit(betas.1));
    let t = state.step as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(lr), T::lit(eps));
    for (idx, (_, p)) in store.iter_mut().enumerate() {
        let grad = p.grad.take().expect("checked above");
        let m = &mut state.first[idx];
        let v = &mut state.second[idx];
        for (k, (w, &g)) in p.value.data_mut().iter_mut().zip(&grad).enumerate() {
            m[k] = b1 * m[k] + (T::one() - b1) * g;
            v[k] = b2 * v[k] + (T::one() - b2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_text: f64,
    pub l_graph: f64,
    pub l_ot: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

/// Mean per-token fine-tuning loss over `corpus`.
pub fn corpus_token_loss<T: Scalar>(model: &Model<T>, vocab: &Vocabulary, corpus: &[GraphTextPair]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for pair in corpus {
        let mut g = Graph::new();
        let loss = loss_finetune(&mut g, model.net(), vocab, pair)?;
        let n = pair.n() + 1;
        total += g.value(loss).item().as_f64() * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

fn write_record(log: &mut Option<BufWriter<File>>, rec: &StepRecord, path: &Path) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let line = serde_json::to_string(rec).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// [`train_with`] without a step callback.
pub fn train<T: Scalar>(
    corpus: &[GraphTextPair],
    model: &mut Model<T>,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainLog> {
    train_with(corpus, model, vocab, cfg, out_dir, |_, _| true)
}

/// Runs the configured task. When `out_dir` is given, per-step records go to
/// `log.jsonl` and a checkpoint is written to `checkpoints/epoch-N/` at the
/// end of every epoch (and when training stops early). `on_step` sees every
/// record after the update and may stop training by returning `false`.
pub fn train_with<T, F>(
    corpus: &[GraphTextPair],
    model: &mut Model<T>,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: F,
) -> Result<TrainLog>
where
    T: Scalar,
    F: FnMut(&StepRecord, &Model<T>) -> bool,
{
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let total_steps = cfg.total_steps(corpus.len());
    let log_path = out_dir.map(|d| d.join("log.jsonl"));
    let mut log_file = match (&out_dir, &log_path) {
        (Some(dir), Some(path)) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(*dir, e))?;
            Some(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
        }
        _ => None,
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = AdamState::new(&model.params);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    let mut stopped = false;
    model.params.zero_grads();

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            if step == total_steps {
                break 'epochs;
            }
            let scale = T::one() / T::lit(batch.len() as f64);
            let mut rec = StepRecord {
                step: step + 1,
                lr: lr_at(step + 1, total_steps, cfg),
                l_text: 0.0,
                l_graph: 0.0,
                l_ot: 0.0,
                total: 0.0,
            };
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let pair = &corpus[i];
                let mut g = Graph::new();
                let loss = match cfg.task {
                    Task::Pretrain => {
                        let b = combined_pretrain_loss(
                            &mut g,
                            model.net(),
                            vocab,
                            pair,
                            &mut mask_rng,
                            &cfg.pretrain,
                        )?;
                        rec.l_text += b.l_text * inv;
                        rec.l_graph += b.l_graph * inv;
                        rec.l_ot += b.l_ot * inv;
                        rec.total += b.total_value * inv;
                        b.total
                    }
                    Task::Finetune => {
                        let l = loss_finetune(&mut g, model.net(), vocab, pair)?;
                        let v = g.value(l).item().as_f64();
                        rec.l_text += v * inv;
                        rec.total += v * inv;
                        l
                    }
                };
                let scaled = g.scale(loss, scale);
                g.backward_to(scaled, &mut model.params)?;
            }
            model.params.clip_grad_norm(T::lit(cfg.max_grad_norm));
            adam_step(&mut model.params, &mut adam, rec.lr, cfg.adam_betas, cfg.adam_eps)?;
            step += 1;
            if let Some(path) = &log_path {
                write_record(&mut log_file, &rec, path)?;
            }
            log.records.push(rec);
            if !on_step(&rec, model) {
                stopped = true;
            }
            if stopped || step == total_steps {
                if let Some(dir) = out_dir {
                    write_epoch_checkpoint(model, vocab, dir, epoch)?;
                }
                break 'epochs;
            }
        }
        info!("epoch {epoch} done after {step} steps");
        if let Some(dir) = out_dir {
            write_epoch_checkpoint(model, vocab, dir, epoch)?;
        }
    }
    if let (Some(w), Some(path)) = (log_file.as_mut(), &log_path) {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(log)
}

fn write_epoch_checkpoint<T: Scalar>(model: &Model<T>, vocab: &Vocabulary, dir: &Path, epoch: usize) -> Result<()> {
    let path = dir.join("checkpoints").join(format!("epoch-{epoch}"));
    save_checkpoint(&model.params, &model.config, vocab, &path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(warmup_ratio: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.5,
            warmup_ratio,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(0.1);
        assert_eq!(lr_at(0, 100, &c), 0.0);
        assert_eq!(lr_at(10, 100, &c), 0.5);
        assert_eq!(lr_at(100, 100, &c), 0.0);
        assert!((lr_at(5, 100, &c) - 0.25).abs() < 1e-15);
        assert!((lr_at(55, 100, &c) - 0.25).abs() < 1e-15);
        let no_warmup = cfg(0.0);
        assert_eq!(lr_at(0, 10, &no_warmup), 0.5);
    }

    fn scalar_store(value: f64, grad: Option<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value)).unwrap();
        s.get_mut("w").unwrap().grad = grad.map(|g| vec![g]);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(1.25, Some(0.0));
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.1, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(s.value("w").unwrap().item(), 1.25);
        assert!(s.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(1.0, Some(1.0));
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 1e-3, (0.9, 0.999), 1e-8).unwrap();
        let moved = 1.0 - s.value("w").unwrap().item();
        assert!((moved - 1e-3).abs() < 1e-10, "{moved}");
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut s = scalar_store(1.0, None);
        let mut st = AdamState::new(&s);
        assert!(matches!(
            adam_step(&mut s, &mut st, 1e-3, (0.9, 0.999), 1e-8),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn rejects_invalid_config() {
        let c = TrainConfig {
            warmup_ratio: 1.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
