//! Checkpoint layout: a JSON header, one NUL byte, then little-endian `f32`
//! blobs in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::{RngStream, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: usize,
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        tensors.push(Entry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            offset,
        });
        offset += 4 * p.value().numel();
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        tensors,
    };
    w.write_all(&serde_json::to_vec(&header)?)?;
    w.write_all(&[0])?;
    let mut blob = Vec::with_capacity(offset);
    for (_, p) in model.store.iter() {
        for x in p.value().data() {
            blob.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    w.write_all(&blob)?;
    Ok(())
}

/// Parses a checkpoint, checking every tensor against a model built from its config.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nul = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nul])?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let blob = &bytes[nul + 1..];
    let mut model = Model::<f32>::new(header.config, &mut RngStream::new(0))?;
    if header.tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, config needs {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    let mut expected_offset = 0;
    for entry in &header.tensors {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {:?}", entry.name)))?;
        let param = model.store.get_mut(id);
        if param.value().shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} has shape {:?}, config needs {:?}",
                entry.name,
                entry.shape,
                param.value().shape()
            )));
        }
        let n = param.value().numel();
        if entry.offset != expected_offset || entry.offset + 4 * n > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {:?} has a bad offset", entry.name)));
        }
        let data = blob[entry.offset..entry.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        param.set_value(Tensor::new(entry.shape.clone(), data)?)?;
        expected_offset += 4 * n;
    }
    if expected_offset != blob.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            blob.len() - expected_offset
        )));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    read_checkpoint(fs::File::open(path)?)
}
