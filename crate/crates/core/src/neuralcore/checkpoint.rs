//! Model checkpoint files: versioned header `TSLAB-MODEL v1`, a JSON meta
//! line (spec descriptor, tensor inventory, optional adaptation metadata),
//! then parameter tensors as little-endian 32-bit floats.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainEmbedding, Linear, LoraDelta, MlpSpec, ModelError, ModelParams};
use crate::linalg::Mat;

const MODEL_MAGIC: &str = "TSLAB-MODEL v1";

/// Adaptation provenance stored alongside adapted checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationMeta {
    pub method: String,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: MlpSpec,
    layer_dims: Vec<(usize, usize)>,
    lora_dims: Option<Vec<(usize, usize)>>,
    domain: Option<DomainMeta>,
    dropout_seed: u64,
    adaptation: Option<AdaptationMeta>,
}

#[derive(Serialize, Deserialize)]
struct DomainMeta {
    domain_id: String,
    trainable: bool,
    dim: usize,
}

fn ck_err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn write_tensor(out: &mut Vec<u8>, data: &[f64]) {
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_tensor(bytes: &[u8], pos: &mut usize, want: usize) -> Result<Vec<f64>, ModelError> {
    if bytes.len() < *pos + 8 {
        return Err(ck_err("truncated tensor header"));
    }
    let len = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap()) as usize;
    *pos += 8;
    if len != want {
        return Err(ck_err(format!("tensor length {len}, expected {want}")));
    }
    if bytes.len() < *pos + 4 * len {
        return Err(ck_err("truncated tensor payload"));
    }
    let mut data = Vec::with_capacity(len);
    for i in 0..len {
        let b = &bytes[*pos + 4 * i..*pos + 4 * i + 4];
        data.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
    }
    *pos += 4 * len;
    Ok(data)
}

pub fn save_checkpoint(
    path: &Path,
    spec: &MlpSpec,
    params: &ModelParams,
    adaptation: Option<AdaptationMeta>,
) -> Result<(), ModelError> {
    let meta = Meta {
        spec: spec.clone(),
        layer_dims: params.layers.iter().map(|l| (l.w.rows, l.w.cols)).collect(),
        lora_dims: params
            .lora
            .as_ref()
            .map(|ds| ds.iter().map(|d| (d.a.rows, d.b.cols)).collect()),
        domain: params.domain_embedding.as_ref().map(|e| DomainMeta {
            domain_id: e.domain_id.clone(),
            trainable: e.trainable,
            dim: e.vector.len(),
        }),
        dropout_seed: params.dropout_seed,
        adaptation,
    };
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(
        serde_json::to_string(&meta)
            .map_err(|e| ck_err(e.to_string()))?
            .as_bytes(),
    );
    out.push(b'\n');
    for l in &params.layers {
        write_tensor(&mut out, &l.w.data);
        write_tensor(&mut out, &l.b);
    }
    if let Some(deltas) = &params.lora {
        for d in deltas {
            write_tensor(&mut out, &d.a.data);
            write_tensor(&mut out, &d.b.data);
        }
    }
    if let Some(e) = &params.domain_embedding {
        write_tensor(&mut out, &e.vector);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ck_err(e.to_string()))?;
    }
    let tmp = path.with_extension("ck.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| ck_err(e.to_string()))?;
    f.write_all(&out).map_err(|e| ck_err(e.to_string()))?;
    f.sync_all().map_err(|e| ck_err(e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| ck_err(e.to_string()))?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(MlpSpec, ModelParams, Option<AdaptationMeta>), ModelError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| ck_err(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)
        .map_err(|e| ck_err(e.to_string()))?;
    let header_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ck_err("missing header"))?;
    if &bytes[..header_end] != MODEL_MAGIC.as_bytes() {
        return Err(ck_err(format!(
            "bad header, expected {MODEL_MAGIC:?}"
        )));
    }
    let meta_end = bytes[header_end + 1..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| header_end + 1 + p)
        .ok_or_else(|| ck_err("missing meta line"))?;
    let meta: Meta = serde_json::from_slice(&bytes[header_end + 1..meta_end])
        .map_err(|e| ck_err(format!("meta: {e}")))?;
    let mut pos = meta_end + 1;

    let mut layers = Vec::with_capacity(meta.layer_dims.len());
    for &(rows, cols) in &meta.layer_dims {
        let w = read_tensor(&bytes, &mut pos, rows * cols)?;
        let b = read_tensor(&bytes, &mut pos, cols)?;
        layers.push(Linear {
            w: Mat { rows, cols, data: w },
            b,
        });
    }
    let lora = match &meta.lora_dims {
        None => None,
        Some(dims) => {
            let mut deltas = Vec::with_capacity(dims.len());
            for &(in_dim, out_dim) in dims {
                let a = read_tensor(&bytes, &mut pos, in_dim * super::LORA_RANK)?;
                let b = read_tensor(&bytes, &mut pos, super::LORA_RANK * out_dim)?;
                deltas.push(LoraDelta {
                    a: Mat {
                        rows: in_dim,
                        cols: super::LORA_RANK,
                        data: a,
                    },
                    b: Mat {
                        rows: super::LORA_RANK,
                        cols: out_dim,
                        data: b,
                    },
                });
            }
            Some(deltas)
        }
    };
    let domain_embedding = match &meta.domain {
        None => None,
        Some(d) => Some(DomainEmbedding {
            vector: read_tensor(&bytes, &mut pos, d.dim)?,
            domain_id: d.domain_id.clone(),
            trainable: d.trainable,
        }),
    };
    if pos != bytes.len() {
        return Err(ck_err("trailing bytes after tensors"));
    }
    Ok((
        meta.spec,
        ModelParams {
            layers,
            lora,
            domain_embedding,
            dropout_seed: meta.dropout_seed,
        },
        meta.adaptation,
    ))
}
