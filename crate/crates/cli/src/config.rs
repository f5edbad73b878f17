//! Flat JSON run configuration. Every key is optional in the file; flags
//! given on the command line override file values.

use std::fs;
use std::path::{Path, PathBuf};

use graphtext_core::generate::BeamConfig;
use graphtext_core::masking::MaskingConfig;
use graphtext_core::model::{DecoderConfig, EncoderConfig, EncoderVariant, ModelConfig};
use graphtext_core::objectives::{LossWeights, PretrainSettings};
use graphtext_core::ot::OtConfig;
use graphtext_core::training::{Task, TrainConfig};
use graphtext_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: EncoderVariant,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub layer_norm_eps: f64,
    pub init_std: f64,

    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub seed: u64,

    pub w_text: f64,
    pub w_graph: f64,
    pub w_ot: f64,
    pub mask_text_entity: f64,
    pub mask_text_other: f64,
    pub mask_graph_entity: f64,
    pub mask_graph_relation: f64,

    pub ot_beta: f64,
    pub ot_inner_k: usize,
    pub ot_outer_n: usize,

    pub beam_size: usize,
    pub length_penalty: f64,

    pub min_freq: usize,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::default();
        let train = TrainConfig::default();
        let masking = MaskingConfig::default();
        let ot = OtConfig::default();
        let beam = BeamConfig::default();
        let weights = LossWeights::default();
        Self {
            variant: enc.variant,
            enc_layers: enc.num_layers,
            enc_heads: enc.num_heads,
            dec_layers: dec.num_layers,
            dec_heads: dec.num_heads,
            d_model: enc.d_model,
            d_ff: enc.d_ff,
            max_input_len: enc.max_input_len,
            max_output_len: dec.max_output_len,
            layer_norm_eps: 1e-5,
            init_std: 0.25,
            learning_rate: train.learning_rate,
            warmup_ratio: train.warmup_ratio,
            max_grad_norm: train.max_grad_norm,
            adam_eps: train.adam_eps,
            adam_beta1: train.adam_betas.0,
            adam_beta2: train.adam_betas.1,
            batch_size: train.batch_size,
            epochs: train.epochs,
            max_steps: train.max_steps,
            seed: train.seed,
            w_text: weights.text,
            w_graph: weights.graph,
            w_ot: weights.ot,
            mask_text_entity: masking.text_entity,
            mask_text_other: masking.text_other,
            mask_graph_entity: masking.graph_entity,
            mask_graph_relation: masking.graph_relation,
            ot_beta: ot.beta,
            ot_inner_k: ot.inner_k,
            ot_outer_n: ot.outer_n,
            beam_size: beam.beam_size,
            length_penalty: beam.length_penalty,
            min_freq: 1,
            corpus: None,
            vocab: None,
            init: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, or the file when given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(
            vocab_size,
            EncoderConfig {
                num_layers: self.enc_layers,
                num_heads: self.enc_heads,
                d_model: self.d_model,
                d_ff: self.d_ff,
                max_input_len: self.max_input_len,
                variant: self.variant,
            },
            DecoderConfig {
                num_layers: self.dec_layers,
                num_heads: self.dec_heads,
                d_model: self.d_model,
                d_ff: self.d_ff,
                max_output_len: self.max_output_len,
            },
        );
        cfg.layer_norm_eps = self.layer_norm_eps;
        cfg.init_std = self.init_std;
        cfg
    }

    pub fn pretrain_settings(&self) -> PretrainSettings {
        PretrainSettings {
            masking: MaskingConfig {
                text_entity: self.mask_text_entity,
                text_other: self.mask_text_other,
                graph_entity: self.mask_graph_entity,
                graph_relation: self.mask_graph_relation,
            },
            ot: OtConfig {
                beta: self.ot_beta,
                inner_k: self.ot_inner_k,
                outer_n: self.ot_outer_n,
            },
            weights: LossWeights {
                text: self.w_text,
                graph: self.w_graph,
                ot: self.w_ot,
            },
        }
    }

    pub fn train(&self, task: Task) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            warmup_ratio: self.warmup_ratio,
            max_grad_norm: self.max_grad_norm,
            adam_eps: self.adam_eps,
            adam_betas: (self.adam_beta1, self.adam_beta2),
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: self.max_steps,
            seed: self.seed,
            task,
            pretrain: self.pretrain_settings(),
        }
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam_size,
            length_penalty: self.length_penalty,
            max_len: self.max_output_len,
        }
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        self.model(graphtext_core::tokenizer::special::ALL.len()).validate()?;
        self.train(task).validate()?;
        self.beam().validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses `"1,0,0"` into text/graph/alignment weights.
pub fn parse_weights(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated weights, got {s:?}"));
    }
    let mut out = [0.0; 3];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p.parse().map_err(|_| format!("{p:?} is not a number"))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_keys_are_optional_and_checked() {
        let cfg: RunConfig = serde_json::from_str(r#"{"d_model": 32, "variant": "SEQ"}"#).unwrap();
        assert_eq!(cfg.d_model, 32);
        assert_eq!(cfg.variant, EncoderVariant::Seq);
        assert_eq!(cfg.learning_rate, 3e-5);
        assert!(serde_json::from_str::<RunConfig>(r#"{"dmodel": 32}"#).is_err());
    }

    #[test]
    fn weights_flag() {
        assert_eq!(parse_weights("1,0,0").unwrap(), [1.0, 0.0, 0.0]);
        assert!(parse_weights("1,0").is_err());
        assert!(parse_weights("1,x,0").is_err());
    }
}
