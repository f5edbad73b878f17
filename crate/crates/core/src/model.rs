//! Model configuration, parameter layout and initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

/// Encoder flavour: the structure-aware encoder and its two ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EncoderVariant {
    /// Pooled contextual entity/relation states with relation-aware
    /// attention in every layer.
    Joint,
    /// Plain Transformer over the linearized graph.
    Seq,
    /// Relation-aware attention over entity/relation vectors taken from
    /// dedicated learned tables instead of contextual states.
    Rel,
}

impl std::str::FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "JOINT" => Ok(Self::Joint),
            "SEQ" => Ok(Self::Seq),
            "REL" => Ok(Self::Rel),
            other => Err(Error::Config(format!("unknown encoder variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_input_len: usize,
    pub variant: EncoderVariant,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 128,
            max_input_len: 600,
            variant: EncoderVariant::Joint,
        }
    }
}

impl EncoderConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_output_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 128,
            max_output_len: 64,
        }
    }
}

impl DecoderConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub layer_norm_eps: f64,
    /// Standard deviation of the embedding tables at initialization.
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, encoder: EncoderConfig, decoder: DecoderConfig) -> Self {
        Self {
            vocab_size,
            encoder,
            decoder,
            layer_norm_eps: 1e-5,
            init_std: 0.25,
        }
    }

    pub fn d_model(&self) -> usize {
        self.encoder.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < crate::tokenizer::special::ALL.len() {
            return bad(format!("vocab_size {} smaller than the special tokens", self.vocab_size));
        }
        if e.d_model != d.d_model {
            return bad(format!("encoder d_model {} != decoder d_model {}", e.d_model, d.d_model));
        }
        if e.num_heads == 0 || !e.d_model.is_multiple_of(e.num_heads) {
            return bad(format!("d_model {} not divisible by {} encoder heads", e.d_model, e.num_heads));
        }
        if d.num_heads == 0 || !d.d_model.is_multiple_of(d.num_heads) {
            return bad(format!("d_model {} not divisible by {} decoder heads", d.d_model, d.num_heads));
        }
        if e.d_ff == 0 || d.d_ff == 0 || e.max_input_len == 0 || d.max_output_len == 0 {
            return bad("feed-forward widths and maximum lengths must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return bad("layer_norm_eps must be positive and init_std non-negative".into());
        }
        Ok(())
    }
}

/// Names of the structure-aware attention matrices of one head.
pub const STRUCT_WEIGHTS: [&str; 5] = ["wqs", "wks", "wvs", "wkr", "wvr"];

pub fn enc_prefix(layer: usize) -> String {
    format!("enc.{layer}")
}

pub fn dec_prefix(layer: usize) -> String {
    format!("dec.{layer}")
}

pub fn struct_name(layer: usize, head: usize, which: &str) -> String {
    format!("enc.{layer}.struct.h{head}.{which}")
}

/// True for parameters that only the structure-aware aggregation uses.
pub fn is_structure_param(name: &str) -> bool {
    name.contains(".struct.") || name.starts_with("rel.")
}

/// A configuration plus its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Borrowed view used by forward passes, so parameters can be perturbed
/// independently of the configuration.
#[derive(Debug, Clone, Copy)]
pub struct Net<'a, T> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamStore<T>,
}

impl<'a, T> Net<'a, T> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamStore<T>) -> Self {
        Self { config, params }
    }
}

struct Init<'r, R> {
    rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), self.rng)
    }
}

fn add_attention<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    prefix: &str,
    heads: usize,
    d: usize,
) -> Result<()> {
    let dk = d / heads;
    for h in 0..heads {
        for w in ["wq", "wk", "wv"] {
            store.insert(format!("{prefix}.h{h}.{w}"), init.matrix(d, dk))?;
        }
    }
    store.insert(format!("{prefix}.wo"), init.matrix(d, d))
}

fn add_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::filled(&[1, d], T::one()))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, d]))
}

fn add_ffn<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    prefix: &str,
    d: usize,
    d_ff: usize,
) -> Result<()> {
    store.insert(format!("{prefix}.w1"), init.matrix(d, d_ff))?;
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[1, d_ff]))?;
    store.insert(format!("{prefix}.w2"), init.matrix(d_ff, d))?;
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[1, d]))
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init { rng };
        let d = config.d_model();
        let e = &config.encoder;
        let dec = &config.decoder;
        let std = config.init_std;

        params.insert("embed.tokens", Tensor::randn(&[config.vocab_size, d], std, init.rng))?;
        params.insert("embed.enc_pos", Tensor::randn(&[e.max_input_len, d], std, init.rng))?;
        params.insert("embed.dec_pos", Tensor::randn(&[dec.max_output_len, d], std, init.rng))?;

        for l in 0..e.num_layers {
            let p = enc_prefix(l);
            add_layer_norm(&mut params, &format!("{p}.ln1"), d)?;
            add_attention(&mut params, &mut init, &format!("{p}.attn"), e.num_heads, d)?;
            if e.variant != EncoderVariant::Seq {
                for h in 0..e.num_heads {
                    for w in STRUCT_WEIGHTS {
                        params.insert(struct_name(l, h, w), init.matrix(d, e.d_k()))?;
                    }
                }
            }
            add_layer_norm(&mut params, &format!("{p}.ln2"), d)?;
            add_ffn(&mut params, &mut init, &format!("{p}.ffn"), d, e.d_ff)?;
        }
        add_layer_norm(&mut params, "enc.final_ln", d)?;
        if e.variant == EncoderVariant::Rel {
            params.insert("rel.entity_table", Tensor::randn(&[config.vocab_size, d], std, init.rng))?;
            params.insert("rel.relation_table", Tensor::randn(&[config.vocab_size, d], std, init.rng))?;
        }

        for l in 0..dec.num_layers {
            let p = dec_prefix(l);
            add_layer_norm(&mut params, &format!("{p}.ln1"), d)?;
            add_attention(&mut params, &mut init, &format!("{p}.self_attn"), dec.num_heads, d)?;
            add_layer_norm(&mut params, &format!("{p}.ln2"), d)?;
            add_attention(&mut params, &mut init, &format!("{p}.cross_attn"), dec.num_heads, d)?;
            add_layer_norm(&mut params, &format!("{p}.ln3"), d)?;
            add_ffn(&mut params, &mut init, &format!("{p}.ffn"), d, dec.d_ff)?;
        }
        add_layer_norm(&mut params, "dec.final_ln", d)?;
        Ok(Self { config, params })
    }

    /// [`Model::new`] with a ChaCha8 generator seeded from `seed`.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn net(&self) -> Net<'_, T> {
        Net::new(&self.config, &self.params)
    }

    /// Sets every structure-aware attention matrix named `which` (one of
    /// [`STRUCT_WEIGHTS`]) to zero.
    pub fn zero_structure_weights(&mut self, which: &[&str]) {
        for l in 0..self.config.encoder.num_layers {
            for h in 0..self.config.encoder.num_heads {
                for w in which {
                    if let Some(p) = self.params.get_mut(&struct_name(l, h, w)) {
                        p.value.data_mut().iter_mut().for_each(|x| *x = T::zero());
                    }
                }
            }
        }
    }
}
