//! Dense interpreter: executes a (possibly masked) graph on a [`Tape`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::arch::StructMask;
use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

use super::walk::{walk, Backend, Flow};
use super::{CompGraph, GraphError, GraphNode, NodeId, NodeOp};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Weights of every layer (prunable or fixed), keyed by node id.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params {
    pub layers: BTreeMap<NodeId, LayerParams>,
}

fn weight_shape(op: &NodeOp) -> Option<Vec<usize>> {
    match op {
        NodeOp::Linear { in_features, out_features, .. } => Some(vec![*out_features, *in_features]),
        NodeOp::Conv2d { in_channels, out_channels, kernel, .. } => {
            Some(vec![*out_channels, *in_channels, *kernel, *kernel])
        }
        _ => None,
    }
}

impl Params {
    /// Zero biases; normal weights with variance `2/fan_in` (He), except
    /// layers read by an add, which get `1/(fan_in·n)` for an `n`-way add,
    /// and layers read by the output, which get `1/fan_in`.
    pub fn init<R: Rng + ?Sized>(graph: &CompGraph, rng: &mut R) -> Self {
        let mut gain = BTreeMap::new();
        for node in graph.nodes() {
            match node.op {
                NodeOp::Add => {
                    for i in &node.inputs {
                        gain.insert(*i, 1.0 / node.inputs.len() as f64);
                    }
                }
                NodeOp::Output => {
                    gain.insert(node.inputs[0], 1.0);
                }
                _ => {}
            }
        }
        let mut layers = BTreeMap::new();
        for node in graph.layers() {
            let shape = weight_shape(&node.op).expect("layer");
            let fan_in: usize = shape[1..].iter().product();
            let g = gain.get(&node.id).copied().unwrap_or(2.0);
            let weight = Tensor::randn(&shape, (g / fan_in as f64).sqrt(), rng);
            let bias = node.op.has_bias().then(|| Tensor::zeros(&[shape[0]]));
            layers.insert(node.id, LayerParams { weight, bias });
        }
        Self { layers }
    }

    /// Checks that every layer has correctly shaped weights.
    pub fn check(&self, graph: &CompGraph) -> Result<(), GraphError> {
        if self.layers.len() != graph.layers().count() {
            return Err(GraphError::Mask(format!(
                "parameter set covers {} layers, graph has {}",
                self.layers.len(),
                graph.layers().count()
            )));
        }
        for node in graph.layers() {
            let lp = self.layers.get(&node.id).ok_or_else(|| GraphError::Validation {
                node: node.id,
                msg: "no parameters for layer".into(),
            })?;
            let shape = weight_shape(&node.op).expect("layer");
            let bias_ok = match (&lp.bias, node.op.has_bias()) {
                (Some(b), true) => b.shape() == [shape[0]],
                (None, false) => true,
                _ => false,
            };
            if lp.weight.shape() != shape.as_slice() || !bias_ok {
                return Err(GraphError::Validation {
                    node: node.id,
                    msg: format!("weight {:?} does not match layer shape {shape:?}", lp.weight.shape()),
                });
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.layers
            .values()
            .map(|l| l.weight.numel() + l.bias.as_ref().map_or(0, Tensor::numel))
            .sum()
    }

    /// Every tensor in a fixed order: per layer, weight then bias.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for lp in self.layers.values_mut() {
            out.push(&mut lp.weight);
            if let Some(b) = &mut lp.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for lp in self.layers.values() {
            out.push(&lp.weight);
            if let Some(b) = &lp.bias {
                out.push(b);
            }
        }
        out
    }
}

/// Parameters recorded as tape leaves.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub layers: BTreeMap<NodeId, (Var, Option<Var>)>,
}

impl BoundParams {
    /// Variables in the same order as [`Params::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.layers.values() {
            out.push(*w);
            if let Some(b) = b {
                out.push(*b);
            }
        }
        out
    }
}

/// Records `params` on `tape`. With `trainable = false` the leaves are
/// constants and no gradient is computed for them.
pub fn bind_params(tape: &mut Tape, params: &Params, trainable: bool) -> BoundParams {
    let mut layers = BTreeMap::new();
    for (id, lp) in &params.layers {
        let leaf = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let w = leaf(tape, &lp.weight);
        let b = lp.bias.as_ref().map(|b| leaf(tape, b));
        layers.insert(*id, (w, b));
    }
    BoundParams { layers }
}

struct Dense<'a> {
    tape: &'a mut Tape,
    params: &'a BoundParams,
    input: Var,
}

impl Backend for Dense<'_> {
    type Value = Var;

    fn input(&mut self, _node: &GraphNode) -> Result<Var, GraphError> {
        Ok(self.input)
    }

    fn layer(&mut self, node: &GraphNode, x: &Flow<Var>, out_keep: usize) -> Result<Var, GraphError> {
        let (w, b) = *self.params.layers.get(&node.id).ok_or_else(|| GraphError::Validation {
            node: node.id,
            msg: "no parameters bound for layer".into(),
        })?;
        let full_out = node.op.out_channels().expect("layer");
        let full_in = self.tape.value(w).shape()[1];
        let identity_in = x.channels.len() == full_in && x.channels.iter().enumerate().all(|(i, c)| i == *c);
        let (w, b) = if out_keep == full_out && identity_in {
            (w, b)
        } else {
            let ws = self.tape.slice_weight(w, out_keep, &x.channels);
            let bs = b.map(|b| self.tape.slice_prefix(b, out_keep));
            (ws, bs)
        };
        let out = match node.op {
            NodeOp::Linear { .. } => self.tape.linear(x.value, w, b),
            NodeOp::Conv2d { stride, padding, .. } => self.tape.conv2d(x.value, w, b, stride, padding),
            _ => unreachable!("walker only passes layers"),
        };
        out.map_err(|e| GraphError::shape(node.id, e))
    }

    fn unary(&mut self, node: &GraphNode, x: &Flow<Var>) -> Result<Var, GraphError> {
        let t = &mut *self.tape;
        match node.op {
            NodeOp::Relu => Ok(t.relu(x.value)),
            NodeOp::Sigmoid => Ok(t.sigmoid(x.value)),
            NodeOp::Flatten => Ok(t.flatten(x.value)),
            NodeOp::GlobalPool => t.global_avg_pool(x.value).map_err(|e| GraphError::shape(node.id, e)),
            NodeOp::MaxPool { kernel, stride, padding } => {
                t.max_pool2d(x.value, kernel, stride, padding).map_err(|e| GraphError::shape(node.id, e))
            }
            _ => unreachable!("walker only passes pass-through kinds"),
        }
    }

    fn add(&mut self, node: &GraphNode, xs: &[&Flow<Var>]) -> Result<Var, GraphError> {
        if xs.len() == 1 {
            return Ok(xs[0].value);
        }
        let vars: Vec<Var> = xs.iter().map(|f| f.value).collect();
        self.tape.add(&vars).map_err(|e| GraphError::shape(node.id, e))
    }

    fn concat(&mut self, node: &GraphNode, xs: &[&Flow<Var>]) -> Result<Var, GraphError> {
        let vars: Vec<Var> = xs.iter().map(|f| f.value).collect();
        self.tape.concat(&vars).map_err(|e| GraphError::shape(node.id, e))
    }
}

/// Records a masked forward pass of `graph` on an existing tape and returns
/// the output variable. Several passes may share one tape and one set of
/// bound parameters; gradients then accumulate across them.
pub fn forward_on_tape(
    graph: &CompGraph,
    tape: &mut Tape,
    params: &BoundParams,
    input: Var,
    mask: Option<&StructMask>,
) -> Result<Var, GraphError> {
    let shape = tape.value(input).shape();
    if shape.len() != graph.input_shape().len() + 1 || shape[1..] != *graph.input_shape() {
        return Err(GraphError::Shape {
            node: graph.nodes()[0].id,
            msg: format!("input {:?} does not match graph input [N, {:?}]", shape, graph.input_shape()),
        });
    }
    let mut backend = Dense { tape, params, input };
    Ok(walk(graph, mask, &mut backend)?.value)
}

/// Result of [`interpret`].
#[derive(Debug)]
pub struct Interpretation {
    pub output: Tensor,
    /// Present when recording was requested.
    pub recording: Option<Recording>,
}

#[derive(Debug)]
pub struct Recording {
    pub tape: Tape,
    pub params: BoundParams,
    pub output: Var,
}

/// Executes the graph on `input` under `mask` (the full network when
/// `None`). With `record`, the returned tape supports reverse-mode
/// gradients of any scalar built from the output.
pub fn interpret(
    graph: &CompGraph,
    params: &Params,
    input: &Tensor,
    mask: Option<&StructMask>,
    record: bool,
) -> Result<Interpretation, GraphError> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, record);
    let x = tape.constant(input.clone());
    let out = forward_on_tape(graph, &mut tape, &bound, x, mask)?;
    let output = tape.value(out).clone();
    let recording = record.then_some(Recording { tape, params: bound, output: out });
    Ok(Interpretation { output, recording })
}
