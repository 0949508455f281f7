//! Named-tensor checkpoints.
//!
//! Layout: a magic line, a line holding the header length in bytes, the
//! JSON header (tensor table plus metadata), then the payload of
//! little-endian `f32` values in table order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::shape_model::CategoryRegistry;
use crate::{Error, Result};

pub const MAGIC: &str = "KPLIFT-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Echo of the training configuration, if any.
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
    #[serde(default)]
    pub epoch: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    registry: CategoryRegistry,
    metadata: Metadata,
    tensors: Vec<TensorEntry>,
}

/// Checkpoint bytes for `model`. Identical models give identical bytes.
pub fn encode(model: &Model, metadata: &Metadata) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut payload = Vec::with_capacity(4 * model.params.scalar_count());
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32le".into(),
            offset: payload.len(),
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        model: model.config.clone(),
        registry: model.registry.clone(),
        metadata: metadata.clone(),
        tensors,
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = format!("{MAGIC}\n{}\n{json}\n", json.len() + 1).into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Model, Metadata)> {
    let bad = |m: String| Error::Checkpoint(m);
    let line_end = |from: usize| bytes[from..].iter().position(|&b| b == b'\n').map(|p| from + p);
    let l1 = line_end(0).ok_or_else(|| bad("missing magic line".into()))?;
    if &bytes[..l1] != MAGIC.as_bytes() {
        return Err(bad("not a checkpoint file".into()));
    }
    let l2 = line_end(l1 + 1).ok_or_else(|| bad("missing header length".into()))?;
    let len: usize = std::str::from_utf8(&bytes[l1 + 1..l2])
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("unreadable header length".into()))?;
    let start = l2 + 1;
    if bytes.len() < start + len {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[start..start + len]).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[start + len..];

    let mut params = ParamStore::new();
    let mut expected = 0;
    for e in &header.tensors {
        if e.dtype != "f32le" {
            return Err(bad(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected {
            return Err(bad(format!(
                "tensor {}: offset {} does not follow the previous tensor (expected {expected})",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > payload.len() {
            return Err(bad(format!(
                "tensor {} is missing from the truncated payload ({} of {end} bytes)",
                e.name,
                payload.len()
            )));
        }
        if params.contains(&e.name) {
            return Err(bad(format!("tensor {} appears twice", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert_param(&e.name, data, &e.shape);
        expected = end;
    }
    if expected != payload.len() {
        return Err(bad(format!("{} trailing payload bytes", payload.len() - expected)));
    }
    // every parameter the configuration calls for must be present, with its shape
    let reference = Model::new(header.model.clone(), header.registry.clone(), 0)?;
    for (name, t) in reference.params.iter() {
        match params.get(name) {
            Ok(p) if p.shape() == t.shape() => {}
            Ok(p) => {
                return Err(bad(format!("tensor {name}: shape {:?}, expected {:?}", p.shape(), t.shape())));
            }
            Err(_) => return Err(bad(format!("tensor {name} is missing"))),
        }
    }
    if params.len() != reference.params.len() {
        return Err(bad("checkpoint holds unknown tensors".into()));
    }
    Ok((
        Model {
            config: header.model,
            registry: header.registry,
            params,
        },
        header.metadata,
    ))
}

pub fn save_checkpoint(model: &Model, metadata: &Metadata, path: &Path) -> Result<()> {
    let bytes = encode(model, metadata)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Metadata)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifter::LifterConfig;

    fn model() -> Model {
        let mut reg = CategoryRegistry::new();
        reg.register("a", vec!["x".into(), "y".into(), "z".into()]).unwrap();
        let mut cfg = ModelConfig {
            lifter: LifterConfig {
                latent_dim: 3,
                feature_dim: 4,
                trunk_width: 5,
                trunk_layers: 1,
                context_dim: 2,
                ..LifterConfig::default()
            },
            ..ModelConfig::default()
        };
        cfg.detector.dim = 8;
        cfg.detector.heads = 2;
        cfg.detector.ffn_dim = 4;
        cfg.detector.blocks = 1;
        Model::new(cfg, reg, 7).unwrap()
    }

    #[test]
    fn round_trip_is_f32_exact_and_stable() {
        let m = model();
        let meta = Metadata {
            epoch: 3,
            ..Metadata::default()
        };
        let bytes = encode(&m, &meta).unwrap();
        let (back, meta2) = decode(&bytes).unwrap();
        assert_eq!(meta2, meta);
        let q = m.params.quantized();
        for (name, t) in q.iter() {
            assert_eq!(back.params.get(name).unwrap().data(), t.data());
        }
        assert_eq!(encode(&back, &meta).unwrap(), bytes);
    }

    #[test]
    fn truncated_payload_names_the_tensor() {
        let bytes = encode(&model(), &Metadata::default()).unwrap();
        let err = decode(&bytes[..bytes.len() - 4]).unwrap_err().to_string();
        let last = model().params.names().last().unwrap().clone();
        assert!(err.contains(&last), "{err}");
    }

    #[test]
    fn offset_mismatch_is_rejected() {
        let bytes = encode(&model(), &Metadata::default()).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        // shift the second tensor's offset by one float
        let first = text.find("\"offset\":").unwrap();
        let second = first + 1 + text[first + 1..].find("\"offset\":").unwrap();
        let num_end = second + 9 + text[second + 9..].find(|c: char| !c.is_ascii_digit()).unwrap();
        let old: usize = text[second + 9..num_end].parse().unwrap();
        let new = format!("{:0width$}", old + 4, width = num_end - second - 9);
        if new.len() == num_end - second - 9 {
            let mut b = bytes.clone();
            b[second + 9..num_end].copy_from_slice(new.as_bytes());
            assert!(matches!(decode(&b), Err(Error::Checkpoint(_))));
        }
        assert!(decode(b"garbage").is_err());
    }
}
