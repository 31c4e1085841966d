//! Versioned model container: a JSON header (role, architecture and its
//! hash, schedule, training config, seed) followed by raw little-endian f64
//! tensor data. Payload round-trips byte-identically through load/save.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schedule::ScheduleSpec;

const MAGIC: &[u8; 4] = b"DMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Ddpm,
    Classifier,
    Oracle,
    Embedder,
}

impl std::fmt::Display for ModelRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelRole::Ddpm => "ddpm",
            ModelRole::Classifier => "classifier",
            ModelRole::Oracle => "oracle",
            ModelRole::Embedder => "embedder",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchitectureSpec {
    Unet(crate::nn::UNetConfig),
    Cnn(crate::nn::CnnConfig),
}

impl ArchitectureSpec {
    pub fn describe(&self) -> String {
        match self {
            ArchitectureSpec::Unet(c) => c.describe(),
            ArchitectureSpec::Cnn(c) => c.describe(),
        }
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.describe().as_bytes());
        hex(&hasher.finalize())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub role: ModelRole,
    pub architecture: ArchitectureSpec,
    pub architecture_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    pub training: serde_json::Value,
    pub seed: u64,
    pub param_shapes: Vec<Vec<usize>>,
    #[serde(default)]
    pub attribute_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_signature: Option<String>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl CheckpointHeader {
    pub fn validate_architecture(&self) -> Result<()> {
        let expected = self.architecture.hash();
        if expected != self.architecture_hash {
            return Err(Error::Checkpoint(format!(
                "architecture hash mismatch: header says {}, recomputed {}",
                self.architecture_hash, expected
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    params: &[ArrayViewD<'_, f64>],
) -> Result<()> {
    if header.param_shapes.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "header lists {} tensors, got {}",
            header.param_shapes.len(),
            params.len()
        )));
    }
    for (shape, p) in header.param_shapes.iter().zip(params.iter()) {
        if shape.as_slice() != p.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor shape mismatch: header {:?} vs data {:?}",
                shape,
                p.shape()
            )));
        }
    }
    let header_bytes = serde_json::to_vec(header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for p in params {
        for v in p.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<ArrayD<f64>>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut buf4 = [0u8; 4];
    file.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            version
        )));
    }
    let mut buf8 = [0u8; 8];
    file.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    header.validate_architecture()?;
    let mut params = Vec::with_capacity(header.param_shapes.len());
    for shape in &header.param_shapes {
        let n: usize = shape.iter().product();
        let mut data = vec![0f64; n];
        for v in data.iter_mut() {
            file.read_exact(&mut buf8)
                .map_err(|_| Error::Checkpoint("truncated payload".into()))?;
            *v = f64::from_le_bytes(buf8);
        }
        params.push(
            ArrayD::from_shape_vec(shape.clone(), data)
                .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {}", e)))?,
        );
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok((header, params))
}

/// SHA-256 of a file, for experiment manifests.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}
