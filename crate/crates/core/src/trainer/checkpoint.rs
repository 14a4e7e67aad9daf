//! Weight checkpoints.
//!
//! `weights.bin` is the concatenation of every tensor as little-endian
//! IEEE-754 `f64`, layers in ascending node id, weight before bias.
//! `manifest.json` lists each tensor's node, role, shape and element
//! offset, and carries the graph in model-spec text so a checkpoint is
//! self-contained.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_graph, CompGraph, GraphError, LayerParams, NodeId, Params};
use crate::tensor::Tensor;

pub const FORMAT: &str = "stp-weights-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub node: NodeId,
    pub role: Role,
    pub shape: Vec<usize>,
    /// Offset in elements (8 bytes each) from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub elements: usize,
    pub tensors: Vec<TensorEntry>,
    pub graph: String,
}

pub fn encode(graph: &CompGraph, params: &Params) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (&node, lp) in &params.layers {
        let parts = std::iter::once((Role::Weight, &lp.weight)).chain(lp.bias.as_ref().map(|b| (Role::Bias, b)));
        for (role, t) in parts {
            tensors.push(TensorEntry { node, role, shape: t.shape().to_vec(), offset });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.numel();
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f64-le".into(),
        elements: offset,
        tensors,
        graph: graph.to_spec_text(),
    };
    (manifest, blob)
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<(CompGraph, Params), CheckpointError> {
    if manifest.format != FORMAT || manifest.dtype != "f64-le" {
        return Err(CheckpointError::Corrupt(format!("unsupported format {} / {}", manifest.format, manifest.dtype)));
    }
    if blob.len() != manifest.elements * 8 {
        return Err(CheckpointError::Corrupt(format!("blob has {} bytes, manifest expects {}", blob.len(), manifest.elements * 8)));
    }
    let graph = build_graph(&manifest.graph)?;
    let mut layers: BTreeMap<NodeId, LayerParams> = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let bytes = blob
            .get(e.offset * 8..(e.offset + n) * 8)
            .ok_or_else(|| CheckpointError::Corrupt(format!("tensor of node {} runs past the blob", e.node)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(e.shape.clone(), data);
        match e.role {
            Role::Weight => {
                layers.insert(e.node, LayerParams { weight: t, bias: None });
            }
            Role::Bias => {
                layers
                    .get_mut(&e.node)
                    .ok_or_else(|| CheckpointError::Corrupt(format!("bias before weight for node {}", e.node)))?
                    .bias = Some(t);
            }
        }
    }
    let params = Params { layers };
    params.check(&graph)?;
    Ok((graph, params))
}

/// Writes `weights.bin` and `manifest.json` into `dir`.
pub fn save(dir: &Path, graph: &CompGraph, params: &Params) -> Result<(), CheckpointError> {
    let (manifest, blob) = encode(graph, params);
    std::fs::write(dir.join("weights.bin"), blob)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(CompGraph, Params), CheckpointError> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let blob = std::fs::read(dir.join("weights.bin"))?;
    decode(&manifest, &blob)
}
