//! Safetensors checkpoints for the model and the latent bank.
//!
//! Tensors are stored as F64. Configuration travels in one JSON string under
//! the `flashback` metadata key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::latent_bank::{BankConfig, LatentBank, LatentTask};
use crate::model::{LowRank, ModelConfig, ModelState};

const META_KEY: &str = "flashback";

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Meta {
    Model { config: ModelConfig, seed: u64 },
    Bank { config: BankConfig, model: ModelConfig },
}

fn ck_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn encode(tensors: &BTreeMap<String, Tensor>, meta: &Meta) -> Result<Vec<u8>> {
    let bytes: BTreeMap<&String, Vec<u8>> = tensors.iter().map(|(n, t)| (n, t.to_le_bytes())).collect();
    let views = tensors
        .iter()
        .map(|(n, t)| {
            TensorView::new(Dtype::F64, t.shape().to_vec(), &bytes[n])
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Shape(format!("tensor {n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = serde_json::to_string(meta).map_err(|e| Error::json("checkpoint metadata", e))?;
    let info = HashMap::from([(META_KEY.to_string(), meta)]);
    safetensors::serialize(views, Some(info)).map_err(|e| Error::Shape(format!("safetensors: {e}")))
}

fn decode(path: &Path, buf: &[u8]) -> Result<(BTreeMap<String, Tensor>, Meta)> {
    let (_, header) = SafeTensors::read_metadata(buf).map_err(|e| ck_err(path, e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ck_err(path, "missing metadata"))?;
    let meta: Meta = serde_json::from_str(meta).map_err(|e| ck_err(path, format!("bad metadata: {e}")))?;
    let st = SafeTensors::deserialize(buf).map_err(|e| ck_err(path, e.to_string()))?;
    let mut out = BTreeMap::new();
    for name in st.names() {
        let view = st.tensor(name).map_err(|e| ck_err(path, e.to_string()))?;
        if view.dtype() != Dtype::F64 {
            return Err(ck_err(path, format!("{name}: expected F64, found {:?}", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(view.shape().to_vec(), data).map_err(|e| ck_err(path, format!("{name}: {e}")))?;
        out.insert(name.to_string(), t);
    }
    Ok((out, meta))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn take(path: &Path, tensors: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = tensors.remove(name).ok_or_else(|| ck_err(path, format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(ck_err(path, format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

pub fn model_bytes(model: &ModelState) -> Result<Vec<u8>> {
    let mut tensors = BTreeMap::new();
    for (n, t) in &model.base {
        tensors.insert(format!("base.{n}"), t.clone());
    }
    for (n, t) in model.trainable_params() {
        tensors.insert(n, t.clone());
    }
    encode(
        &tensors,
        &Meta::Model {
            config: model.config.clone(),
            seed: model.seed,
        },
    )
}

pub fn save_model(model: &ModelState, path: &Path) -> Result<()> {
    write(path, &model_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut tensors, meta) = decode(path, &buf)?;
    let Meta::Model { config, seed } = meta else {
        return Err(ck_err(path, "not a model checkpoint"));
    };
    config.validate().map_err(|e| ck_err(path, e.to_string()))?;
    let mut base = BTreeMap::new();
    for (n, shape) in config.base_shapes() {
        base.insert(n.clone(), take(path, &mut tensors, &format!("base.{n}"), &shape)?);
    }
    let mut adapter = BTreeMap::new();
    for t in config.targets() {
        let a = take(path, &mut tensors, &format!("adapter.{}.A", t.name), &[config.adapter_rank, t.inp])?;
        let b = take(path, &mut tensors, &format!("adapter.{}.B", t.name), &[t.out, config.adapter_rank])?;
        adapter.insert(t.name, LowRank { a, b });
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ck_err(path, format!("unexpected tensor {extra}")));
    }
    Ok(ModelState {
        config,
        seed,
        base,
        adapter,
    })
}

pub fn save_bank(bank: &LatentBank, model: &ModelConfig, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for id in bank.ids() {
        let task = bank.task(id);
        tensors.insert(
            format!("bank.{}.{}.key", id.group, id.slot),
            Tensor::new(vec![task.key.len()], task.key.clone())?,
        );
        for (n, t) in bank.params_of(id) {
            tensors.insert(n, t.clone());
        }
    }
    let meta = Meta::Bank {
        config: bank.config.clone(),
        model: model.clone(),
    };
    write(path, &encode(&tensors, &meta)?)
}

pub fn load_bank(path: &Path) -> Result<LatentBank> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut tensors, meta) = decode(path, &buf)?;
    let Meta::Bank { config, model } = meta else {
        return Err(ck_err(path, "not a latent bank checkpoint"));
    };
    config.validate().map_err(|e| ck_err(path, e.to_string()))?;
    let targets = model.targets();
    let mut groups = Vec::with_capacity(config.groups);
    for g in 0..config.groups {
        let mut slots = Vec::with_capacity(config.keys_per_group);
        for s in 0..config.keys_per_group {
            let key = take(path, &mut tensors, &format!("bank.{g}.{s}.key"), &[config.key_dim])?.into_data();
            let mut increments = BTreeMap::new();
            for t in &targets {
                let a = take(path, &mut tensors, &format!("bank.{g}.{s}.{}.A", t.name), &[config.rank, t.inp])?;
                let b = take(path, &mut tensors, &format!("bank.{g}.{s}.{}.B", t.name), &[t.out, config.rank])?;
                increments.insert(t.name.clone(), LowRank { a, b });
            }
            slots.push(LatentTask { key, increments });
        }
        groups.push(slots);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ck_err(path, format!("unexpected tensor {extra}")));
    }
    Ok(LatentBank {
        config,
        targets,
        groups,
    })
}
