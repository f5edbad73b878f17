//! Checkpoint directories: `manifest.json`, `params.bin` (little-endian f64
//! in manifest order) and `vocab.txt`.

use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_structure_param, Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::Vocabulary;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const VOCAB: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub vocab: String,
    pub params: Vec<ParamEntry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint<T: Scalar>(
    store: &ParamStore<T>,
    config: &ModelConfig,
    vocab: &Vocabulary,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(store.len());
    let mut bytes = Vec::with_capacity(store.num_elements() * 8);
    for (name, p) in store.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
        });
        for x in p.value.data() {
            bytes.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let manifest = Manifest {
        model: config.clone(),
        vocab: VOCAB.into(),
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let write = |name: &str, data: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, data).map_err(|e| Error::io(path, e))
    };
    write(MANIFEST, json.as_bytes())?;
    write(PARAMS, &bytes)?;
    vocab.save(dir.join(VOCAB))
}

pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

/// Manifest plus parameter tensors in manifest order.
pub fn read_checkpoint<T: Scalar>(dir: &Path) -> Result<(Manifest, NamedTensors<T>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
    let path = dir.join(PARAMS);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 8 {
        return Err(ckpt_err(format!(
            "{} holds {} bytes, manifest describes {} values",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))));
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        if entry.dtype != "f64" {
            return Err(ckpt_err(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let data: Vec<T> = values.by_ref().take(n).collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| ckpt_err(e.to_string()))?;
        tensors.push((entry.name.clone(), t));
    }
    Ok((manifest, tensors))
}

/// Vocabulary referenced by the manifest in `dir`.
pub fn load_vocab(dir: &Path) -> Result<Vocabulary> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
    Vocabulary::load(dir.join(manifest.vocab))
}

/// Rebuilds the saved model and its vocabulary. The parameter list must
/// match the layout implied by the saved configuration exactly.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Model<T>, Vocabulary)> {
    let (manifest, tensors) = read_checkpoint::<T>(dir)?;
    let vocab = Vocabulary::load(dir.join(&manifest.vocab))?;
    if vocab.len() != manifest.model.vocab_size {
        return Err(ckpt_err(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            manifest.model.vocab_size
        )));
    }
    let mut model = Model::seeded(manifest.model, 0).map_err(|e| ckpt_err(e.to_string()))?;
    if tensors.len() != model.params.len() {
        return Err(ckpt_err(format!(
            "manifest lists {} parameters, configuration implies {}",
            tensors.len(),
            model.params.len()
        )));
    }
    for (i, (name, t)) in tensors.into_iter().enumerate() {
        let (expected_name, slot) = model.params.by_index_mut(i);
        if expected_name != name || slot.value.shape() != t.shape() {
            return Err(ckpt_err(format!(
                "parameter {name} {:?} does not match expected {expected_name} {:?}",
                t.shape(),
                slot.value.shape()
            )));
        }
        slot.value = t;
    }
    Ok((model, vocab))
}

/// Copies checkpoint parameters into `model` by name. Structure-aware
/// parameters absent from the checkpoint are set to zero; any other missing
/// parameter or any shape disagreement is an error. Checkpoint parameters
/// unknown to `model` are ignored.
pub fn init_from_checkpoint<T: Scalar>(model: &mut Model<T>, dir: &Path) -> Result<()> {
    let (_, tensors) = read_checkpoint::<T>(dir)?;
    let mut loaded = vec![false; model.params.len()];
    for (name, t) in tensors {
        let Some(idx) = model.params.index_of(&name) else {
            warn!("ignoring checkpoint parameter {name}");
            continue;
        };
        let (_, slot) = model.params.by_index_mut(idx);
        if slot.value.shape() != t.shape() {
            return Err(ckpt_err(format!(
                "parameter {name} has shape {:?} in the checkpoint, {:?} in the model",
                t.shape(),
                slot.value.shape()
            )));
        }
        slot.value = t;
        loaded[idx] = true;
    }
    for (idx, done) in loaded.into_iter().enumerate() {
        if done {
            continue;
        }
        let (name, slot) = model.params.by_index_mut(idx);
        if !is_structure_param(name) {
            return Err(ckpt_err(format!("checkpoint lacks parameter {name}")));
        }
        slot.value.data_mut().iter_mut().for_each(|x| *x = T::zero());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderConfig, EncoderConfig, EncoderVariant};

    fn tiny(variant: EncoderVariant) -> Model<f64> {
        let enc = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            d_model: 8,
            d_ff: 8,
            max_input_len: 16,
            variant,
        };
        let dec = DecoderConfig {
            num_layers: 1,
            num_heads: 2,
            d_model: 8,
            d_ff: 8,
            max_output_len: 8,
        };
        let cfg = ModelConfig::new(Vocabulary::specials().len(), enc, dec);
        Model::seeded(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(EncoderVariant::Joint);
        save_checkpoint(&m.params, &m.config, &Vocabulary::specials(), dir.path()).unwrap();
        let (back, vocab) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(vocab, Vocabulary::specials());
        for ((n1, p1), (n2, p2)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            let b1: Vec<u64> = p1.value.data().iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u64> = p2.value.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncated_params_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(EncoderVariant::Seq);
        save_checkpoint(&m.params, &m.config, &Vocabulary::specials(), dir.path()).unwrap();
        let path = dir.path().join(PARAMS);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn edited_shape_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny(EncoderVariant::Seq);
        save_checkpoint(&m.params, &m.config, &Vocabulary::specials(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let entry = manifest.params.iter_mut().find(|p| p.name == "dec.final_ln.gain").unwrap();
        entry.shape = vec![8, 1];
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn seq_checkpoint_into_joint_zeroes_structure() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny(EncoderVariant::Seq);
        save_checkpoint(&seq.params, &seq.config, &Vocabulary::specials(), dir.path()).unwrap();
        let mut joint = tiny(EncoderVariant::Joint);
        init_from_checkpoint(&mut joint, dir.path()).unwrap();
        for (name, p) in joint.params.iter() {
            if is_structure_param(name) {
                assert!(p.value.data().iter().all(|&x| x == 0.0));
            } else {
                assert_eq!(p.value, seq.params.get(name).unwrap().value);
            }
        }
    }
}
