//! Masked graph traversal shared by dense execution, proxy cost estimation
//! and compact-network extraction.
//!
//! The walker owns the pruning semantics: skipped layers produce no value,
//! elementwise kinds propagate absence, `add` drops absent operands, and
//! every value carries the list of original channel indices it holds along
//! axis 1. Backends only see the surviving computation.

use crate::arch::StructMask;

use super::{CompGraph, GraphError, GraphNode, NodeOp};

/// A live value plus the original channel indices it carries.
#[derive(Clone, Debug)]
pub struct Flow<V> {
    pub value: V,
    pub channels: Vec<usize>,
}

pub trait Backend {
    type Value: Clone;

    fn input(&mut self, node: &GraphNode) -> Result<Self::Value, GraphError>;

    /// Linear or conv layer keeping its first `out_keep` output channels and
    /// reading the input channels listed in `x.channels`.
    fn layer(&mut self, node: &GraphNode, x: &Flow<Self::Value>, out_keep: usize) -> Result<Self::Value, GraphError>;

    /// Relu, sigmoid, flatten, global_pool, max_pool.
    fn unary(&mut self, node: &GraphNode, x: &Flow<Self::Value>) -> Result<Self::Value, GraphError>;

    /// Called with the present operands only (at least one).
    fn add(&mut self, node: &GraphNode, xs: &[&Flow<Self::Value>]) -> Result<Self::Value, GraphError>;

    fn concat(&mut self, node: &GraphNode, xs: &[&Flow<Self::Value>]) -> Result<Self::Value, GraphError>;

    fn output(&mut self, _node: &GraphNode, x: &Flow<Self::Value>) -> Result<Self::Value, GraphError> {
        Ok(x.value.clone())
    }
}

fn flatten_channels(channels: &[usize], full_shape: &[usize]) -> Vec<usize> {
    let inner: usize = full_shape[1..].iter().product();
    if inner == 1 {
        return channels.to_vec();
    }
    channels.iter().flat_map(|&c| c * inner..(c + 1) * inner).collect()
}

pub fn walk<B: Backend>(graph: &CompGraph, mask: Option<&StructMask>, backend: &mut B) -> Result<Flow<B::Value>, GraphError> {
    if let Some(m) = mask {
        m.check(graph)?;
    }
    let mut flows: Vec<Option<Flow<B::Value>>> = Vec::with_capacity(graph.nodes().len());
    let fetch = |flows: &Vec<Option<Flow<B::Value>>>, id| -> Option<usize> {
        let pos = graph.position(id);
        flows[pos].as_ref().map(|_| pos)
    };
    let mut result = None;
    for node in graph.nodes() {
        let id = node.id;
        let flow = match &node.op {
            NodeOp::Input { shape } => {
                let value = backend.input(node)?;
                Some(Flow { value, channels: (0..shape[0]).collect() })
            }
            NodeOp::Linear { .. } | NodeOp::Conv2d { .. } => {
                let full = node.op.out_channels().expect("layer");
                let (kept, out_keep) = match (node.prunable, mask.and_then(|m| m.layer(id))) {
                    (true, Some(lm)) => (lm.kept, lm.channels),
                    _ => (true, full),
                };
                if !kept {
                    None
                } else {
                    let pos = fetch(&flows, node.inputs[0]).ok_or_else(|| GraphError::Mask(format!(
                        "layer {id} is kept but its input {} was skipped",
                        node.inputs[0]
                    )))?;
                    let x = flows[pos].as_ref().expect("present");
                    let value = backend.layer(node, x, out_keep)?;
                    Some(Flow { value, channels: (0..out_keep).collect() })
                }
            }
            op if op.is_pass_through() => match fetch(&flows, node.inputs[0]) {
                None => None,
                Some(pos) => {
                    let x = flows[pos].as_ref().expect("present");
                    let channels = if *op == NodeOp::Flatten {
                        flatten_channels(&x.channels, graph.out_shape(node.inputs[0]))
                    } else {
                        x.channels.clone()
                    };
                    let value = backend.unary(node, x)?;
                    Some(Flow { value, channels })
                }
            },
            NodeOp::Add => {
                let present: Vec<&Flow<B::Value>> = node
                    .inputs
                    .iter()
                    .filter_map(|src| flows[graph.position(*src)].as_ref())
                    .collect();
                if present.is_empty() {
                    None
                } else {
                    if present.iter().any(|f| f.channels != present[0].channels) {
                        return Err(GraphError::Shape {
                            node: id,
                            msg: "add operands keep different channels; mask is not group-consistent".into(),
                        });
                    }
                    let channels = present[0].channels.clone();
                    let value = backend.add(node, &present)?;
                    Some(Flow { value, channels })
                }
            }
            NodeOp::Concat => {
                let mut parts = Vec::with_capacity(node.inputs.len());
                let mut channels = Vec::new();
                let mut offset = 0;
                for src in &node.inputs {
                    let f = flows[graph.position(*src)].as_ref().ok_or_else(|| {
                        GraphError::Mask(format!("concat {id} reads skipped node {src}"))
                    })?;
                    channels.extend(f.channels.iter().map(|c| c + offset));
                    offset += graph.out_shape(*src)[0];
                    parts.push(f);
                }
                let value = backend.concat(node, &parts)?;
                Some(Flow { value, channels })
            }
            NodeOp::Output => {
                let pos = fetch(&flows, node.inputs[0])
                    .ok_or_else(|| GraphError::Mask("the network output was skipped".into()))?;
                let x = flows[pos].as_ref().expect("present");
                let value = backend.output(node, x)?;
                let f = Flow { value, channels: x.channels.clone() };
                result = Some(f.clone());
                Some(f)
            }
            _ => unreachable!("all kinds handled"),
        };
        flows.push(flow);
    }
    result.ok_or_else(|| GraphError::Stage("graph has no output".into()))
}
