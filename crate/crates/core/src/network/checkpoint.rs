//! Float checkpoint archive: magic, little-endian header length, JSON header
//! (config, tensor manifest, optional fake-quant state), raw `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, NetworkConfig, ParamStore};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::quant::QatState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QYCKPT01";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    fused: bool,
    qat: Option<QatState>,
    tensors: Vec<TensorEntry>,
}

pub(crate) fn write_archive(path: &Path, magic: &[u8; 8], header: &[u8], blob: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let write = |w: &mut BufWriter<File>, b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    write(&mut w, magic)?;
    write(&mut w, &(header.len() as u64).to_le_bytes())?;
    write(&mut w, header)?;
    write(&mut w, blob)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Returns `(header bytes, blob bytes)` after checking the magic.
pub(crate) fn read_archive(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format(format!("{}: {reason}", path.display()));
    if buf.len() < 16 || &buf[..8] != magic {
        return Err(bad("unrecognized archive header"));
    }
    let len = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    if buf.len() < 16 + len {
        return Err(bad("truncated header"));
    }
    let blob = buf.split_off(16 + len);
    Ok((buf[16..].to_vec(), blob))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, p) in model.store.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            offset,
        });
        offset += p.value.numel();
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        config: model.config.clone(),
        fused: model.is_fused(),
        qat: model.qat.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    write_archive(path, CHECKPOINT_MAGIC, &header, &blob)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (header, blob) = read_archive(path, CHECKPOINT_MAGIC)?;
    let header: Header = serde_json::from_slice(&header)
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let data = floats
            .get(t.offset..t.offset + n)
            .ok_or_else(|| Error::Format(format!("{}: tensor {} out of bounds", path.display(), t.name)))?;
        store.insert(t.name, Tensor::from_vec(&t.shape, data.to_vec()), t.trainable);
    }
    Model::from_parts(header.config, store, header.fused, header.qat)
}
