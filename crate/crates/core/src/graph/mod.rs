//! Computation-graph IR.
//!
//! A [`CompGraph`] is a topologically ordered list of nodes plus the stage
//! structure that architectures index into. Stages hold *units*: the
//! prunable layers that are skipped or retained together (a residual block,
//! or a single layer in a plain network).

mod cost;
mod deps;
mod interp;
mod parse;
mod walk;

use std::collections::HashMap;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub use cost::{estimate_cost, estimate_cost_with, flops_ratio, params_ratio, CostConfig, CostReport, NodeCost, ProxyStats};
pub use deps::{extract_dependency_groups, DependencyGroup};
pub use interp::{bind_params, forward_on_tape, interpret, BoundParams, Interpretation, LayerParams, Params, Recording};
pub use walk::{walk, Backend, Flow};

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("node {node}: {msg}")]
    Validation { node: NodeId, msg: String },
    #[error("node {node}: shape error: {msg}")]
    Shape { node: NodeId, msg: String },
    #[error("mask incompatible with graph: {0}")]
    Mask(String),
    #[error("node {node}: dependency error: {msg}")]
    Dependency { node: NodeId, msg: String },
    #[error("{0}")]
    Stage(String),
}

impl GraphError {
    pub(crate) fn shape(node: NodeId, err: AutodiffError) -> Self {
        GraphError::Shape { node, msg: err.to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeOp {
    /// Graph input; `shape` excludes the batch axis.
    Input { shape: Vec<usize> },
    Linear { in_features: usize, out_features: usize, bias: bool },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    Add,
    Concat,
    Relu,
    Sigmoid,
    Flatten,
    GlobalPool,
    MaxPool { kernel: usize, stride: usize, padding: usize },
    Output,
}

impl NodeOp {
    pub fn name(&self) -> &'static str {
        match self {
            NodeOp::Input { .. } => "input",
            NodeOp::Linear { .. } => "linear",
            NodeOp::Conv2d { .. } => "conv2d",
            NodeOp::Add => "add",
            NodeOp::Concat => "concat",
            NodeOp::Relu => "relu",
            NodeOp::Sigmoid => "sigmoid",
            NodeOp::Flatten => "flatten",
            NodeOp::GlobalPool => "global_pool",
            NodeOp::MaxPool { .. } => "max_pool",
            NodeOp::Output => "output",
        }
    }

    pub fn is_layer(&self) -> bool {
        matches!(self, NodeOp::Linear { .. } | NodeOp::Conv2d { .. })
    }

    /// Channel-preserving kinds that transmit output-channel coupling.
    pub fn is_pass_through(&self) -> bool {
        matches!(self, NodeOp::Relu | NodeOp::Sigmoid | NodeOp::Flatten | NodeOp::GlobalPool | NodeOp::MaxPool { .. })
    }

    /// Output channels of a layer.
    pub fn out_channels(&self) -> Option<usize> {
        match self {
            NodeOp::Linear { out_features, .. } => Some(*out_features),
            NodeOp::Conv2d { out_channels, .. } => Some(*out_channels),
            _ => None,
        }
    }

    pub fn has_bias(&self) -> bool {
        matches!(self, NodeOp::Linear { bias: true, .. } | NodeOp::Conv2d { bias: true, .. })
    }
}

/// Position of a prunable layer in the stage structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnitRef {
    pub stage: usize,
    pub unit: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: NodeId,
    pub op: NodeOp,
    pub inputs: Vec<NodeId>,
    /// Only layers can be prunable; prunable layers always have a unit.
    pub prunable: bool,
    pub unit: Option<UnitRef>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Stage {
    /// Units in order; each holds the ids of its prunable layers.
    pub units: Vec<Vec<NodeId>>,
}

impl Stage {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Validated, immutable computation graph.
#[derive(Clone, Debug)]
pub struct CompGraph {
    nodes: Vec<GraphNode>,
    index: HashMap<NodeId, usize>,
    stages: Vec<Stage>,
    input_shape: Vec<usize>,
    /// Full (unmasked) output shape of every node, batch axis excluded.
    out_shapes: Vec<Vec<usize>>,
}

impl CompGraph {
    /// Validates nodes (ids, edges, arity, attributes, stages, shapes) and
    /// builds the graph.
    pub fn from_nodes(nodes: Vec<GraphNode>) -> Result<Self, GraphError> {
        parse::validate(nodes)
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&GraphNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub(crate) fn position(&self, id: NodeId) -> usize {
        self.index[&id]
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Stage sizes in units.
    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(Stage::len).collect()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn out_shape(&self, id: NodeId) -> &[usize] {
        &self.out_shapes[self.index[&id]]
    }

    pub fn prunable_layers(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(|n| n.prunable)
    }

    pub fn layers(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(|n| n.op.is_layer())
    }

    pub fn output_id(&self) -> NodeId {
        self.nodes
            .iter()
            .find(|n| n.op == NodeOp::Output)
            .map(|n| n.id)
            .expect("validated graph has an output")
    }

    /// Number of logits (or output features) of the full network.
    pub fn output_width(&self) -> usize {
        self.out_shape(self.output_id())[0]
    }

    /// Serializes back to the line-oriented model-spec format.
    pub fn to_spec_text(&self) -> String {
        parse::to_text(self)
    }
}

/// Parses and validates a model spec in the `stpgraph v1` format.
pub fn build_graph(text: &str) -> Result<CompGraph, GraphError> {
    parse::parse(text)
}
