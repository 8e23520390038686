//! `checkpoint.bin`: magic, schema number, a JSON header and raw tensors.
//!
//! Layout: 8 magic bytes, `u32` schema (LE), `u64` header length (LE), the
//! UTF-8 JSON header, then every tensor in header order as little-endian
//! `f64` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeometryNormStats;
use crate::losses::LossConfig;
use crate::model::{DualGlance, ModelSpec, ParamStore};
use crate::types::RelationshipTaxonomy;

const MAGIC: &[u8; 8] = b"DGLANCE\0";
const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: String,
    pub config_hash: String,
    /// Training stages completed: 0 (initialization), 1 or 2.
    pub stage: u8,
    pub taxonomy: RelationshipTaxonomy,
    pub model: ModelSpec,
    pub geometry: GeometryNormStats,
    pub loss: LossConfig,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(
        model: &DualGlance,
        stage: u8,
        taxonomy: &RelationshipTaxonomy,
        geometry: &GeometryNormStats,
        loss: &LossConfig,
        config_hash: &str,
    ) -> Self {
        let tensors = model
            .params
            .iter()
            .map(|(name, t)| TensorInfo { name: name.clone(), shape: t.shape().to_vec() })
            .collect();
        Self {
            header: CheckpointHeader {
                version: super::version_string(),
                config_hash: config_hash.to_string(),
                stage,
                taxonomy: taxonomy.clone(),
                model: model.spec.clone(),
                geometry: geometry.clone(),
                loss: loss.clone(),
                tensors,
            },
            params: model.params.clone(),
        }
    }

    pub fn model(&self) -> Result<DualGlance> {
        DualGlance::from_params(self.header.model.clone(), self.params.clone())
    }

    /// Rejects checkpoints built for a different class set or architecture.
    pub fn ensure_compatible(&self, taxonomy: &RelationshipTaxonomy, model: &ModelSpec) -> Result<()> {
        if &self.header.taxonomy != taxonomy {
            return Err(Error::IncompatibleCheckpoint("taxonomy differs from the run configuration".into()));
        }
        if &self.header.model != model {
            return Err(Error::IncompatibleCheckpoint("model spec differs from the run configuration".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 8 * self.params.num_values() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for info in &self.header.tensors {
            for v in self.params.get(&info.name).iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::IncompatibleCheckpoint(msg.to_string());
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        cursor.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        cursor.read_exact(&mut word).map_err(|_| bad("truncated"))?;
        let schema = u32::from_le_bytes(word);
        if schema != SCHEMA {
            return Err(Error::IncompatibleCheckpoint(format!("schema {schema}, expected {SCHEMA}")));
        }
        let mut len = [0u8; 8];
        cursor.read_exact(&mut len).map_err(|_| bad("truncated"))?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header too large"))?;
        if cursor.len() < len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&cursor[..len])?;
        cursor = &cursor[len..];
        let mut params = ParamStore::new();
        for info in &header.tensors {
            let n: usize = info.shape.iter().product();
            if cursor.len() < 8 * n {
                return Err(bad("truncated tensor data"));
            }
            let values = cursor[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = &cursor[8 * n..];
            let t = ArrayD::from_shape_vec(IxDyn(&info.shape), values).map_err(|_| bad("bad tensor shape"))?;
            params.insert(info.name.clone(), t);
        }
        if !cursor.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
