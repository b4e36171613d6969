//! Model files: one line of UTF-8 JSON manifest, a newline, then a raw blob
//! of little-endian `f64`s. The manifest carries the FNV-1a 64 checksum of
//! the blob and a tensor table `name → (shape, byte offset, byte length)`.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::{FixtureMeta, Linear, TinyLM};
use crate::error::{AaqError, Result};
use crate::numerics::TensorMatrix;
use crate::quantizer::{Granularity, QuantSpec};
use crate::transform::{skew_len, TransformParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    shape: [usize; 2],
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerEntry {
    weight_spec: Option<QuantSpec>,
    act_spec: Option<QuantSpec>,
    has_input_rotation: bool,
    has_transform: bool,
    hadamard_prerotation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    vocab_size: usize,
    context_len: usize,
    embed_dim: usize,
    num_hidden: usize,
    seed: u64,
    layers: Vec<LayerEntry>,
    tensors: BTreeMap<String, TensorEntry>,
    fixture: Option<FixtureMeta>,
    blob_len: usize,
    checksum: String,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct BlobWriter {
    blob: Vec<u8>,
    table: BTreeMap<String, TensorEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: String, rows: usize, cols: usize, data: &[f64]) {
        let offset = self.blob.len();
        for v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        self.table.insert(
            name,
            TensorEntry {
                shape: [rows, cols],
                offset,
                length: data.len() * 8,
            },
        );
    }
}

/// Serializes a model to bytes.
pub fn write_model(m: &TinyLM) -> Result<Vec<u8>> {
    m.validate()?;
    let mut w = BlobWriter {
        blob: Vec::new(),
        table: BTreeMap::new(),
    };
    w.push("embedding".into(), m.vocab_size, m.embed_dim, m.embedding.data());
    let mut layers = Vec::with_capacity(m.layers.len());
    for (i, l) in m.layers.iter().enumerate() {
        let (r, c) = l.weight.shape();
        w.push(format!("layer{i}.weight"), r, c, l.weight.data());
        w.push(format!("layer{i}.bias"), 1, l.bias.len(), &l.bias);
        if let Some(rot) = &l.input_rotation {
            w.push(format!("layer{i}.input_rotation"), rot.rows(), rot.cols(), rot.data());
        }
        if let Some(t) = &l.transform {
            w.push(format!("layer{i}.theta.log_scales"), 1, t.dim, &t.log_scales);
            w.push(format!("layer{i}.theta.skew_gen"), 1, t.skew_gen.len(), &t.skew_gen);
        }
        layers.push(LayerEntry {
            weight_spec: l.weight_spec.clone(),
            act_spec: l.act_spec.clone(),
            has_input_rotation: l.input_rotation.is_some(),
            has_transform: l.transform.is_some(),
            hadamard_prerotation: l.hadamard_prerotation,
        });
    }
    let manifest = Manifest {
        format_version: MODEL_FORMAT_VERSION,
        vocab_size: m.vocab_size,
        context_len: m.context_len,
        embed_dim: m.embed_dim,
        num_hidden: m.num_hidden(),
        seed: m.seed,
        layers,
        tensors: w.table,
        fixture: m.fixture.clone(),
        blob_len: w.blob.len(),
        checksum: format!("{:016x}", fnv1a64(&w.blob)),
    };
    let mut out = serde_json::to_vec(&manifest)
        .map_err(|e| AaqError::format("manifest", e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&w.blob);
    Ok(out)
}

fn tensor(
    manifest: &Manifest,
    blob: &[u8],
    name: &str,
    shape: (usize, usize),
) -> Result<TensorMatrix> {
    let e = manifest
        .tensors
        .get(name)
        .ok_or_else(|| AaqError::format(name, "missing from tensor table"))?;
    if (e.shape[0], e.shape[1]) != shape {
        return Err(AaqError::format(
            name,
            format!("shape {:?} disagrees with expected {:?}", e.shape, shape),
        ));
    }
    if e.length != shape.0 * shape.1 * 8 {
        return Err(AaqError::format(
            name,
            format!("byte length {} does not match shape {:?}", e.length, e.shape),
        ));
    }
    let end = e
        .offset
        .checked_add(e.length)
        .filter(|end| *end <= blob.len())
        .ok_or_else(|| AaqError::format(name, "extends past the end of the blob"))?;
    let data = blob[e.offset..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    TensorMatrix::new(shape.0, shape.1, data).map_err(|e| AaqError::format(name, e.to_string()))
}

/// Parses a model from bytes produced by [`write_model`].
pub fn read_model(bytes: &[u8]) -> Result<TinyLM> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| AaqError::format("manifest", "no manifest terminator"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| AaqError::format("manifest", e.to_string()))?;
    if manifest.format_version != MODEL_FORMAT_VERSION {
        return Err(AaqError::format(
            "format_version",
            format!("unsupported version {}", manifest.format_version),
        ));
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != manifest.blob_len {
        return Err(AaqError::format(
            "blob_len",
            format!("manifest says {} bytes, file has {}", manifest.blob_len, blob.len()),
        ));
    }
    let sum = format!("{:016x}", fnv1a64(blob));
    if sum != manifest.checksum {
        return Err(AaqError::format(
            "checksum",
            format!("expected {}, blob hashes to {sum}", manifest.checksum),
        ));
    }
    if manifest.layers.len() != manifest.num_hidden + 1 {
        return Err(AaqError::format("layers", "layer count disagrees with num_hidden"));
    }
    let (v, c, d) = (manifest.vocab_size, manifest.context_len, manifest.embed_dim);
    let h = c * d;
    let embedding = tensor(&manifest, blob, "embedding", (v, d))?;
    let last = manifest.layers.len() - 1;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        let out = if i == last { v } else { h };
        let weight = tensor(&manifest, blob, &format!("layer{i}.weight"), (out, h))?;
        let bias = tensor(&manifest, blob, &format!("layer{i}.bias"), (1, out))?.into_data();
        let input_rotation = entry
            .has_input_rotation
            .then(|| tensor(&manifest, blob, &format!("layer{i}.input_rotation"), (h, h)))
            .transpose()?;
        let transform = if entry.has_transform {
            let ls = tensor(&manifest, blob, &format!("layer{i}.theta.log_scales"), (1, h))?;
            let sg = tensor(&manifest, blob, &format!("layer{i}.theta.skew_gen"), (1, skew_len(h)))?;
            Some(TransformParams {
                dim: h,
                log_scales: ls.into_data(),
                skew_gen: sg.into_data(),
            })
        } else {
            None
        };
        if let Some(s) = &entry.weight_spec {
            s.validate_for(&TensorMatrix::zeros(out, h))
                .map_err(|e| AaqError::format(format!("layers[{i}].weight_spec"), e.to_string()))?;
        }
        if let Some(s) = &entry.act_spec {
            if s.granularity != Granularity::PerTensor {
                return Err(AaqError::format(
                    format!("layers[{i}].act_spec"),
                    "frozen activation specs must be per-tensor",
                ));
            }
            s.validate_for(&TensorMatrix::zeros(1, h))
                .map_err(|e| AaqError::format(format!("layers[{i}].act_spec"), e.to_string()))?;
        }
        layers.push(Linear {
            weight,
            bias,
            input_rotation,
            weight_spec: entry.weight_spec.clone(),
            act_spec: entry.act_spec.clone(),
            transform,
            hadamard_prerotation: entry.hadamard_prerotation,
        });
    }
    let m = TinyLM {
        vocab_size: v,
        context_len: c,
        embed_dim: d,
        embedding,
        layers,
        seed: manifest.seed,
        fixture: manifest.fixture,
    };
    m.validate()?;
    Ok(m)
}

pub fn save_model(m: &TinyLM, path: &Path) -> Result<()> {
    let bytes = write_model(m)?;
    crate::write_atomic(path, &bytes)
}

pub fn load_model(path: &Path) -> Result<TinyLM> {
    let bytes = std::fs::read(path).map_err(|e| AaqError::io(path, e))?;
    read_model(&bytes)
}
