//! INT8 archive.
//!
//! Layout: 8-byte magic `QYINT801`, `u64` little-endian header length, UTF-8
//! JSON header, then a byte blob. The header lists every tensor with its
//! shape, storage type and byte offset into the blob. Quantized weights are
//! `i8` row-major with per-channel `f32` scales and `i32` zero points stored
//! alongside; biases and exempt tensors are raw little-endian `f32`.
//! Activation specs are listed separately with their own scale/zero-point
//! offsets.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ObserverKind, QatState, QuantSpec, QuantSpecs};
use super::spec::{dequantize, quantize, Granularity, Scheme};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::network::checkpoint::{read_archive, write_archive};
use crate::network::{Model, NetworkConfig, ParamStore};

pub const INT8_MAGIC: &[u8; 8] = b"QYINT801";

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum Storage {
    I8,
    F32,
}

#[derive(Serialize, Deserialize)]
struct SpecEntry {
    bit_width: u32,
    scheme: Scheme,
    granularity: Granularity,
    channels: usize,
    scales_offset: usize,
    zero_points_offset: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    storage: Storage,
    trainable: bool,
    offset: usize,
    quant: Option<SpecEntry>,
}

#[derive(Serialize, Deserialize)]
struct ActivationEntry {
    conv: String,
    spec: SpecEntry,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    bit_width: u32,
    exempt: Vec<String>,
    tensors: Vec<TensorEntry>,
    activations: Vec<ActivationEntry>,
}

fn push_spec(blob: &mut Vec<u8>, spec: &QuantSpec) -> Result<SpecEntry> {
    let scales_offset = blob.len();
    for s in &spec.scales {
        blob.extend_from_slice(&s.to_le_bytes());
    }
    let zero_points_offset = blob.len();
    for &z in &spec.zero_points {
        let z = i32::try_from(z).map_err(|_| Error::Argument(format!("zero point {z} exceeds 32 bits")))?;
        blob.extend_from_slice(&z.to_le_bytes());
    }
    Ok(SpecEntry {
        bit_width: spec.bit_width,
        scheme: spec.scheme,
        granularity: spec.granularity,
        channels: spec.scales.len(),
        scales_offset,
        zero_points_offset,
    })
}

fn read_spec(blob: &[u8], e: &SpecEntry) -> Result<QuantSpec> {
    let bad = || Error::Format("quantization metadata out of bounds".into());
    let scales = blob
        .get(e.scales_offset..e.scales_offset + 4 * e.channels)
        .ok_or_else(bad)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let zero_points = blob
        .get(e.zero_points_offset..e.zero_points_offset + 4 * e.channels)
        .ok_or_else(bad)?
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")) as i64)
        .collect();
    let spec = QuantSpec {
        bit_width: e.bit_width,
        scheme: e.scheme,
        granularity: e.granularity,
        scales,
        zero_points,
    };
    spec.validate()?;
    Ok(spec)
}

/// Writes the deploy form of `model` with every quantized convolution
/// weight stored as 8-bit integers under `specs`.
pub fn export_int8(model: &Model, specs: &QuantSpecs, path: &Path) -> Result<()> {
    let mut m = model.clone();
    m.reparameterize();
    let state = m.qat.as_ref();
    let exempt: Vec<String> = state.map(|q| q.exempt.clone()).unwrap_or_default();
    let bit_width = state.map(|q| q.bit_width).unwrap_or(8);
    let mut quantized: IndexMap<String, &QuantSpec> = IndexMap::new();
    let mut activations = Vec::new();
    let mut blob = Vec::new();
    let mut act_specs = Vec::new();
    for key in m.conv_keys() {
        if exempt.contains(&key) {
            continue;
        }
        let (w, _) = m.conv_params(&key);
        let ws = specs.get(&w).ok_or_else(|| Error::MissingSpec(w.clone()))?;
        ws.validate()?;
        if ws.bit_width > 8 || ws.scheme != Scheme::Symmetric {
            return Err(Error::Argument(format!("{w}: only symmetric weights of at most 8 bits fit the archive")));
        }
        let input = format!("{key}.input");
        let a = specs.get(&input).ok_or_else(|| Error::MissingSpec(input.clone()))?;
        a.validate()?;
        quantized.insert(w, ws);
        act_specs.push((key, a));
    }
    for (key, a) in act_specs {
        activations.push(ActivationEntry {
            conv: key,
            spec: push_spec(&mut blob, a)?,
        });
    }
    let mut tensors = Vec::new();
    for (name, p) in m.store.iter() {
        let offset = blob.len();
        let (storage, quant) = match quantized.get(name) {
            Some(spec) => {
                for q in quantize(&p.value, spec) {
                    blob.push(q as i8 as u8);
                }
                (Storage::I8, Some(push_spec(&mut blob, spec)?))
            }
            None => {
                for v in p.value.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                (Storage::F32, None)
            }
        };
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            storage,
            trainable: p.trainable,
            offset,
            quant,
        });
    }
    let header = Header {
        config: m.config.clone(),
        bit_width,
        exempt,
        tensors,
        activations,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    write_archive(path, INT8_MAGIC, &header, &blob)
}

/// Contents of an INT8 archive.
pub struct Int8Archive {
    /// Deploy-form model with dequantized weights and frozen fake quantization.
    pub model: Model,
    pub int_weights: IndexMap<String, Vec<i8>>,
    pub specs: QuantSpecs,
}

pub fn load_int8(path: &Path) -> Result<Int8Archive> {
    let (header, blob) = read_archive(path, INT8_MAGIC)?;
    let header: Header = serde_json::from_slice(&header)
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    let oob = |n: &str| Error::Format(format!("{}: tensor {n} out of bounds", path.display()));
    let mut store = ParamStore::new();
    let mut int_weights = IndexMap::new();
    let mut specs = IndexMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let value = match (t.storage, &t.quant) {
            (Storage::I8, Some(qe)) => {
                let raw = blob.get(t.offset..t.offset + n).ok_or_else(|| oob(&t.name))?;
                let ints: Vec<i8> = raw.iter().map(|&b| b as i8).collect();
                let spec = read_spec(&blob, qe)?;
                let q: Vec<i64> = ints.iter().map(|&v| v as i64).collect();
                let v = dequantize(&q, &t.shape, &spec);
                int_weights.insert(t.name.clone(), ints);
                specs.insert(t.name.clone(), spec);
                v
            }
            (Storage::F32, None) => {
                let raw = blob.get(t.offset..t.offset + 4 * n).ok_or_else(|| oob(&t.name))?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(&t.shape, data)
            }
            _ => return Err(Error::Format(format!("tensor {} has inconsistent storage", t.name))),
        };
        store.insert(t.name.clone(), value, t.trainable);
    }
    let mut frozen_specs = IndexMap::new();
    for a in &header.activations {
        let spec = read_spec(&blob, &a.spec)?;
        specs.insert(format!("{}.input", a.conv), spec.clone());
        frozen_specs.insert(a.conv.clone(), spec);
    }
    let qat = QatState {
        bit_width: header.bit_width,
        enabled: true,
        observer: ObserverKind::MinMax,
        calibrating: false,
        frozen: true,
        exempt: header.exempt,
        ranges: IndexMap::new(),
        frozen_specs,
    };
    let model = Model::from_parts(header.config, store, true, Some(qat))?;
    Ok(Int8Archive {
        model,
        int_weights,
        specs: QuantSpecs(specs),
    })
}
