//! Structure-aware graph-to-text generation.
//!
//! A knowledge graph is linearized into `<H> head <R> relation <T> tail`
//! tokens and read by a Transformer encoder whose layers additionally pool
//! entity and relation states and run relation-aware attention between
//! entities. A Transformer decoder produces the text. Pre-training combines
//! masked text reconstruction, masked graph reconstruction and an
//! optimal-transport alignment between graph units and text states.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod generate;
pub mod gradcheck;
pub mod graph_data;
pub mod layers;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod ot;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod toy;
pub mod training;

pub use autograd::Var;
pub use error::{Error, Result};
pub use generate::BeamConfig;
pub use graph_data::{GraphTextPair, KnowledgeGraph, LinearizedGraph};
pub use masking::MaskingConfig;
pub use model::{DecoderConfig, EncoderConfig, EncoderVariant, ModelConfig};
pub use objectives::{LossWeights, PretrainSettings};
pub use ot::OtConfig;
pub use scalar::Scalar;
pub use tokenizer::Vocabulary;
pub use training::{Task, TrainConfig};

pub type Tensor = tensor::Tensor<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type Graph = autograd::Graph<f64>;
pub type Model = model::Model<f64>;
pub type TransportPlan = ot::TransportPlan<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type Graph32 = autograd::Graph<f32>;
pub type Model32 = model::Model<f32>;
