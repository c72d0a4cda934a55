//! Checkpoint container: the magic `NFPR0001`, a one-line JSON header
//! terminated by `\n`, then every tensor as little-endian `f32` values in
//! declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamScalars;
use super::network::{LayerSpec, Network};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NFPR0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Model family, e.g. `"autoencoder"`, `"cnn"`, `"clusters"`.
    pub kind: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub tensor_shapes: Vec<Vec<usize>>,
    pub adam: Option<AdamScalars>,
    pub seed: u64,
    pub iteration: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_network(
        kind: &str,
        net: &Network<f32>,
        adam: Option<AdamScalars>,
        seed: u64,
        iteration: u64,
        meta: serde_json::Value,
    ) -> Self {
        let tensors: Vec<Tensor<f32>> = net.params().into_iter().cloned().collect();
        Self {
            header: CheckpointHeader {
                kind: kind.to_string(),
                input_shape: net.input_shape().to_vec(),
                layers: net.specs(),
                tensor_shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
                adam,
                seed,
                iteration,
                meta,
            },
            tensors,
        }
    }

    /// Container with no layers; payload tensors only (e.g. cluster models).
    pub fn bare(kind: &str, seed: u64, meta: serde_json::Value, tensors: Vec<Tensor<f32>>) -> Self {
        Self {
            header: CheckpointHeader {
                kind: kind.to_string(),
                input_shape: Vec::new(),
                layers: Vec::new(),
                tensor_shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
                adam: None,
                seed,
                iteration: 0,
                meta,
            },
            tensors,
        }
    }

    pub fn to_network(&self) -> Result<Network<f32>> {
        let mut net = Network::from_specs(self.header.input_shape.clone(), &self.header.layers)?;
        let params = net.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "layers declare {} tensors, payload holds {}",
                params.len(),
                self.tensors.len()
            )));
        }
        for (p, t) in params.into_iter().zip(&self.tensors) {
            if p.shape() != t.shape() {
                return Err(Error::MalformedCheckpoint(format!(
                    "tensor shape {:?} does not match layer shape {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_string(&self.header).expect("header serializes");
        let n: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(9 + json.len() + 4 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedCheckpoint("file shorter than magic".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            if &bytes[..4] == b"NFPR" {
                return Err(Error::CheckpointVersion {
                    expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                    found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
                });
            }
            return Err(Error::MalformedCheckpoint("missing NFPR magic".into()));
        }
        let rest = &bytes[8..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedCheckpoint("unterminated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        let payload = &rest[nl + 1..];
        let total: usize = header
            .tensor_shapes
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum();
        if payload.len() != total * 4 {
            return Err(Error::MalformedCheckpoint(format!(
                "payload holds {} bytes, header declares {}",
                payload.len(),
                total * 4
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut tensors = Vec::with_capacity(header.tensor_shapes.len());
        for shape in &header.tensor_shapes {
            let n = shape.iter().product();
            let data: Vec<f32> = values.by_ref().take(n).collect();
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::volume::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
