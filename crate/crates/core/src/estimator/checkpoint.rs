//! Binary checkpoint: magic, little-endian u32 version, little-endian u64
//! header length, UTF-8 JSON header, then raw little-endian f64 tensor
//! blobs in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CostModel, CostModelSpec, LabelScaler, TrainingMeta};
use crate::error::{Error, Result};
use crate::numerics::{Precision, Tensor};
use crate::plan::Catalog;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BIGGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    precision: Precision,
    /// Byte offset from the start of the blob section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: CostModelSpec,
    init_seed: u64,
    catalog_fingerprint: String,
    scaler: Option<LabelScaler>,
    training: Option<TrainingMeta>,
    tensors: Vec<TensorEntry>,
}

impl CostModel {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::with_capacity(self.store.num_scalars() * 8);
        let mut tensors = Vec::with_capacity(self.store.len());
        for (_, p) in self.store.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                precision: p.tensor.precision(),
                offset: blobs.len() as u64,
            });
            for v in p.tensor.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            init_seed: self.init_seed,
            catalog_fingerprint: self.catalog_fingerprint.clone(),
            scaler: self.scaler,
            training: self.training,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + blobs.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    /// Rebuilds a model from checkpoint bytes. The catalog must be the one
    /// the model was trained against.
    pub fn from_checkpoint_bytes(bytes: &[u8], catalog: &Catalog) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing BIGGCKPT magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let blob_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..blob_start])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.catalog_fingerprint != catalog.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "catalog fingerprint {} does not match the checkpoint's {}",
                catalog.fingerprint(),
                header.catalog_fingerprint
            )));
        }
        let mut model = CostModel::new(catalog, &header.spec, header.init_seed)?;
        if header.tensors.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                header.tensors.len(),
                model.store.len()
            )));
        }
        let blobs = &bytes[blob_start..];
        for entry in &header.tensors {
            let id = model
                .store
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", entry.name)))?;
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start
                .checked_add(numel * 8)
                .filter(|&e| e <= blobs.len())
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the end", entry.name)))?;
            let data = blobs[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)?;
            let t = if entry.precision == Precision::F32 {
                t.with_precision(Precision::F32)
            } else {
                t
            };
            model
                .store
                .set_tensor(id, t)
                .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", entry.name)))?;
        }
        model.scaler = header.scaler;
        model.training = header.training;
        Ok(model)
    }
}

pub fn save_checkpoint(model: &CostModel, path: &Path) -> Result<()> {
    fs::write(path, model.to_checkpoint_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, catalog: &Catalog) -> Result<CostModel> {
    let bytes = fs::read(path)?;
    CostModel::from_checkpoint_bytes(&bytes, catalog)
}
