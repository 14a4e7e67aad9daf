//! Materializes a masked network as a standalone compact graph.

use std::collections::{BTreeMap, HashSet};

use crate::arch::{ArchError, ArchSpec, StructMask};
use crate::graph::{walk, Backend, CompGraph, Flow, GraphError, GraphNode, LayerParams, NodeId, NodeOp, Params};
use crate::models::GraphBuilder;
use crate::tensor::Tensor;

/// Which slice of an original layer survives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeptSlice {
    /// Leading output channels.
    pub out: usize,
    /// Original input channels (or features) read, in order.
    pub inputs: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Extracted {
    pub graph: CompGraph,
    pub params: Params,
    /// Surviving original layers; layers not listed were removed.
    pub kept: BTreeMap<NodeId, KeptSlice>,
}

struct Extractor<'a> {
    builder: GraphBuilder,
    source: &'a Params,
    params: Params,
    kept: BTreeMap<NodeId, KeptSlice>,
}

fn slice_weight(w: &Tensor, out: usize, inputs: &[usize]) -> Tensor {
    let shape = w.shape();
    let inner: usize = shape[2..].iter().product();
    let cin = shape[1];
    let mut data = Vec::with_capacity(out * inputs.len() * inner);
    for o in 0..out {
        for &i in inputs {
            let start = (o * cin + i) * inner;
            data.extend_from_slice(&w.data()[start..start + inner]);
        }
    }
    let mut s = vec![out, inputs.len()];
    s.extend_from_slice(&shape[2..]);
    Tensor::new(s, data)
}

impl Backend for Extractor<'_> {
    type Value = NodeId;

    fn input(&mut self, node: &GraphNode) -> Result<NodeId, GraphError> {
        Ok(self.builder.push(node.op.clone(), &[], None))
    }

    fn layer(&mut self, node: &GraphNode, x: &Flow<NodeId>, out_keep: usize) -> Result<NodeId, GraphError> {
        let src = self.source.layers.get(&node.id).ok_or_else(|| GraphError::Validation {
            node: node.id,
            msg: "no parameters for layer".into(),
        })?;
        let cin = x.channels.len();
        let op = match node.op {
            NodeOp::Linear { bias, .. } => NodeOp::Linear { in_features: cin, out_features: out_keep, bias },
            NodeOp::Conv2d { kernel, stride, padding, bias, .. } => {
                NodeOp::Conv2d { in_channels: cin, out_channels: out_keep, kernel, stride, padding, bias }
            }
            _ => unreachable!("walker only passes layers"),
        };
        let id = self.builder.push(op, &[x.value], node.unit);
        let weight = slice_weight(&src.weight, out_keep, &x.channels);
        let bias = src.bias.as_ref().map(|b| Tensor::new(vec![out_keep], b.data()[..out_keep].to_vec()));
        self.params.layers.insert(id, LayerParams { weight, bias });
        self.kept.insert(node.id, KeptSlice { out: out_keep, inputs: x.channels.clone() });
        Ok(id)
    }

    fn unary(&mut self, node: &GraphNode, x: &Flow<NodeId>) -> Result<NodeId, GraphError> {
        Ok(self.builder.op(node.op.clone(), &[x.value]))
    }

    fn add(&mut self, _node: &GraphNode, xs: &[&Flow<NodeId>]) -> Result<NodeId, GraphError> {
        if xs.len() == 1 {
            return Ok(xs[0].value);
        }
        let ids: Vec<NodeId> = xs.iter().map(|f| f.value).collect();
        Ok(self.builder.op(NodeOp::Add, &ids))
    }

    fn concat(&mut self, _node: &GraphNode, xs: &[&Flow<NodeId>]) -> Result<NodeId, GraphError> {
        let ids: Vec<NodeId> = xs.iter().map(|f| f.value).collect();
        Ok(self.builder.op(NodeOp::Concat, &ids))
    }

    fn output(&mut self, _node: &GraphNode, x: &Flow<NodeId>) -> Result<NodeId, GraphError> {
        Ok(self.builder.op(NodeOp::Output, &[x.value]))
    }
}

/// Compact network for `mask` holding exactly the kept weight slices.
pub fn extract_with_mask(graph: &CompGraph, params: &Params, mask: Option<&StructMask>) -> Result<Extracted, GraphError> {
    params.check(graph)?;
    let mut ex = Extractor { builder: GraphBuilder::new(), source: params, params: Params::default(), kept: BTreeMap::new() };
    walk(graph, mask, &mut ex)?;
    let compact = ex.builder.build()?;
    Ok(Extracted { graph: compact, params: ex.params, kept: ex.kept })
}

pub fn extract_pruned(graph: &CompGraph, params: &Params, arch: &ArchSpec) -> Result<Extracted, ArchError> {
    let mask = arch.to_mask(graph)?;
    Ok(extract_with_mask(graph, params, Some(&mask))?)
}

/// Per layer, `true` for parameters outside the kept slices (weight, bias).
pub type DropMasks = BTreeMap<NodeId, (Vec<bool>, Option<Vec<bool>>)>;

pub fn drop_masks(graph: &CompGraph, kept: &BTreeMap<NodeId, KeptSlice>) -> DropMasks {
    let mut out = BTreeMap::new();
    for node in graph.layers() {
        let (cout, cin, inner) = match node.op {
            NodeOp::Linear { in_features, out_features, .. } => (out_features, in_features, 1),
            NodeOp::Conv2d { in_channels, out_channels, kernel, .. } => (out_channels, in_channels, kernel * kernel),
            _ => unreachable!("layers only"),
        };
        let (w, b) = match kept.get(&node.id) {
            None => (vec![true; cout * cin * inner], node.op.has_bias().then(|| vec![true; cout])),
            Some(slice) => {
                let ins: HashSet<usize> = slice.inputs.iter().copied().collect();
                let mut w = vec![true; cout * cin * inner];
                for o in 0..slice.out {
                    for &i in &ins {
                        w[(o * cin + i) * inner..(o * cin + i + 1) * inner].fill(false);
                    }
                }
                let b = node.op.has_bias().then(|| (0..cout).map(|o| o >= slice.out).collect());
                (w, b)
            }
        };
        out.insert(node.id, (w, b));
    }
    out
}
