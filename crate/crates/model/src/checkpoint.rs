//! Checkpoint file: `NWNCKPT1`, a little-endian u64 header length, a JSON
//! header, then every parameter as a little-endian f64.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;
use crate::transformer::{Model, ModelConfig, ModelError};
use crate::variant::Variant;

const MAGIC: &[u8; 8] = b"NWNCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub variant: Variant,
    pub n_reg: usize,
    pub t_max: f64,
    /// Training seed.
    pub seed: u64,
    pub case: String,
    /// Size, seed and digest of the dataset the model was trained on.
    pub n: usize,
    pub data_seed: u64,
    pub dataset_digest: String,
    pub param_count: usize,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint holds {got} parameters, architecture needs {expected}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_checkpoint<W: Write, T: Real>(mut w: W, header: &CheckpointHeader, model: &Model<T>) -> Result<(), CheckpointError> {
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in &model.params {
        w.write_all(&p.f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read, T: Real>(mut r: R) -> Result<(CheckpointHeader, Model<T>), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 20 {
        return Err(CheckpointError::BadMagic);
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != header.param_count * 8 {
        return Err(CheckpointError::Length {
            expected: header.param_count,
            got: payload.len() / 8,
        });
    }
    let params = payload
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    let model = Model::from_params(header.config, params)?;
    Ok((header, model))
}
