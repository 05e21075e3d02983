//! Checkpoints: a JSON manifest plus one blob of concatenated MGTN records.
//!
//! ```text
//! <dir>/manifest.json   config, vocabularies, tensor index (name → byte offset)
//! <dir>/tensors.mgtn    MGTN records back to back
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultimodalEncoder};
use crate::optim::AdamState;
use crate::tensor::{decode_mgtn, encode_mgtn, ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.mgtn";
const FORMAT: &str = "mgt-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub frozen: bool,
    /// Byte offset of the MGTN record inside the blob.
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub text_vocab: Vec<String>,
    pub answers: Vec<String>,
    pub optimizer_step: u64,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MultimodalEncoder,
    pub adam: Option<AdamState>,
    pub text_vocab: Vec<String>,
    pub answers: Vec<String>,
}

/// Packs tensors into one blob and returns their index entries.
pub fn pack_tensors<'a>(items: impl IntoIterator<Item = (String, TensorRole, bool, &'a Tensor)>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, role, frozen, t) in items {
        let rec = encode_mgtn(t);
        entries.push(TensorEntry {
            name,
            role,
            shape: t.shape().to_vec(),
            frozen,
            offset: blob.len(),
            length: rec.len(),
        });
        blob.extend_from_slice(&rec);
    }
    (entries, blob)
}

pub fn unpack_tensor(entry: &TensorEntry, blob: &[u8]) -> Result<Tensor> {
    let end = entry.offset.checked_add(entry.length).filter(|&e| e <= blob.len()).ok_or_else(|| Error::Format {
        offset: blob.len(),
        msg: format!("tensor {} extends past end of blob", entry.name),
    })?;
    let (t, used) = decode_mgtn(&blob[entry.offset..end]).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset: entry.offset + offset,
            msg,
        },
        other => other,
    })?;
    if used != entry.length || t.shape() != entry.shape.as_slice() {
        return Err(Error::Format {
            offset: entry.offset,
            msg: format!("tensor {} does not match its manifest entry", entry.name),
        });
    }
    Ok(t)
}

fn store_entries(store: &ParamStore, adam: Option<&AdamState>) -> Vec<(String, TensorRole, bool, Tensor)> {
    let mut items: Vec<(String, TensorRole, bool, Tensor)> = store
        .iter()
        .map(|p| (p.name.clone(), TensorRole::Param, p.frozen, p.value.detached()))
        .collect();
    if let Some(st) = adam {
        for (role, bufs) in [(TensorRole::AdamM, &st.m), (TensorRole::AdamV, &st.v)] {
            for (p, buf) in store.iter().zip(bufs) {
                let t = Tensor::new(p.value.shape().to_vec(), buf.clone()).expect("moment matches param");
                items.push((p.name.clone(), role, p.frozen, t));
            }
        }
    }
    items
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let items = store_entries(&ckpt.model.store, ckpt.adam.as_ref());
    let (tensors, blob) = pack_tensors(items.iter().map(|(n, r, f, t)| (n.clone(), *r, *f, t)));
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        model: ckpt.model.config.clone(),
        text_vocab: ckpt.text_vocab.clone(),
        answers: ckpt.answers.clone(),
        optimizer_step: ckpt.adam.as_ref().map_or(0, |a| a.step),
        blob: BLOB_FILE.into(),
        tensors,
    };
    std::fs::write(dir.join(BLOB_FILE), blob)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Config(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob = std::fs::read(dir.join(&manifest.blob))?;
    let mut model = MultimodalEncoder::new(manifest.model.clone())?;
    let mut adam = AdamState::new(&model.store);
    let mut has_adam = false;
    let mut seen = vec![false; model.store.len()];
    for e in &manifest.tensors {
        let id = model
            .store
            .find(&e.name)
            .ok_or_else(|| Error::Config(format!("checkpoint tensor {} is not a model parameter", e.name)))?;
        let t = unpack_tensor(e, &blob)?;
        if t.shape() != model.store.get(id).value.shape() {
            return Err(Error::dim("checkpoint tensor", t.shape(), model.store.get(id).value.shape()));
        }
        match e.role {
            TensorRole::Param => {
                let p = model.store.get_mut(id);
                p.value.data_mut().copy_from_slice(t.data());
                p.frozen = e.frozen;
                seen[id.0] = true;
            }
            TensorRole::AdamM => {
                adam.m[id.0] = t.into_data();
                has_adam = true;
            }
            TensorRole::AdamV => {
                adam.v[id.0] = t.into_data();
                has_adam = true;
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!(
            "checkpoint lacks parameter {}",
            model.store.get(crate::tensor::ParamId(i)).name
        )));
    }
    adam.step = manifest.optimizer_step;
    Ok(Checkpoint {
        model,
        adam: has_adam.then_some(adam),
        text_vocab: manifest.text_vocab,
        answers: manifest.answers,
    })
}

/// Writes every parameter of a store (e.g. one layer) into `dir` with the
/// same manifest-plus-blob layout, without model configuration.
pub fn save_params(dir: &Path, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let items = store_entries(store, None);
    let (tensors, blob) = pack_tensors(items.iter().map(|(n, r, f, t)| (n.clone(), *r, *f, t)));
    std::fs::write(dir.join(BLOB_FILE), blob)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&tensors)? + "\n")?;
    Ok(())
}

/// Restores values saved by [`save_params`] into a store with the same names.
pub fn load_params(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let tensors: Vec<TensorEntry> = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let blob = std::fs::read(dir.join(BLOB_FILE))?;
    for e in &tensors {
        let id = store
            .find(&e.name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {}", e.name)))?;
        let t = unpack_tensor(e, &blob)?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::dim("load_params", t.shape(), p.value.shape()));
        }
        p.value.data_mut().copy_from_slice(t.data());
        p.frozen = e.frozen;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 4,
            heads: 2,
            num_layers: 1,
            d_ff: 4,
            l_max: 6,
            text_vocab_size: 5,
            answer_vocab_size: 2,
            patch_input_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let model = MultimodalEncoder::new(tiny()).unwrap();
        let mut adam = AdamState::new(&model.store);
        adam.step = 7;
        adam.m[0][1] = 0.25;
        let ckpt = Checkpoint {
            model,
            adam: Some(adam),
            text_vocab: vec!["<unk>".into(), "cube".into()],
            answers: vec!["red".into(), "blue".into()],
        };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.model.store, ckpt.model.store);
        assert_eq!(back.adam, ckpt.adam);
        assert_eq!(back.answers, ckpt.answers);
    }

    #[test]
    fn corrupted_blob_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint {
            model: MultimodalEncoder::new(tiny()).unwrap(),
            adam: None,
            text_vocab: vec![],
            answers: vec![],
        };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let mut blob = std::fs::read(&path).unwrap();
        blob.truncate(blob.len() - 5);
        std::fs::write(&path, blob).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn layer_params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = MultimodalEncoder::new(tiny()).unwrap();
        save_params(dir.path(), &model.store).unwrap();
        let mut other = MultimodalEncoder::new(ModelConfig { seed: 99, ..tiny() }).unwrap();
        assert_ne!(other.store, model.store);
        load_params(dir.path(), &mut other.store).unwrap();
        assert_eq!(other.store, model.store);
    }
}
