//! FLOPs and parameter estimation with shape-only proxy values.
//!
//! Convention: one multiply-accumulate is 2 FLOPs; a bias add is 1 FLOP per
//! output element. Activations, pooling, `add` and `concat` cost nothing
//! unless [`CostConfig::count_elementwise`] is set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchError, ArchSpec};
use crate::autodiff::conv_out_size;

use super::walk::{walk, Backend, Flow};
use super::{CompGraph, GraphError, GraphNode, NodeId, NodeOp};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostConfig {
    /// Charge one FLOP per output element for activations and pooling, and
    /// `n - 1` per element for an `n`-way add.
    pub count_elementwise: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub per_node: BTreeMap<NodeId, NodeCost>,
}

/// Instrumentation for the proxy run: one count per handler invocation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProxyStats {
    pub handler_calls: u64,
}

/// A shape with no values; axis 0 is the batch.
type ShapeProxy = Vec<usize>;

struct Proxy {
    config: CostConfig,
    report: CostReport,
    stats: ProxyStats,
    input: ShapeProxy,
}

impl Proxy {
    fn charge(&mut self, id: NodeId, flops: u64, params: u64) {
        self.report.per_node.insert(id, NodeCost { flops, params });
        self.report.flops += flops;
        self.report.params += params;
    }
}

fn numel(s: &[usize]) -> u64 {
    s.iter().map(|&d| d as u64).product()
}

impl Backend for Proxy {
    type Value = ShapeProxy;

    fn input(&mut self, node: &GraphNode) -> Result<ShapeProxy, GraphError> {
        self.stats.handler_calls += 1;
        self.charge(node.id, 0, 0);
        Ok(self.input.clone())
    }

    fn layer(&mut self, node: &GraphNode, x: &Flow<ShapeProxy>, out_keep: usize) -> Result<ShapeProxy, GraphError> {
        self.stats.handler_calls += 1;
        let cin = x.channels.len() as u64;
        let k = out_keep as u64;
        let n = x.value[0];
        let (out, macs_per_out, params) = match node.op {
            NodeOp::Linear { bias, .. } => {
                if x.value.len() != 2 {
                    return Err(GraphError::Shape { node: node.id, msg: format!("linear on proxy {:?}", x.value) });
                }
                (vec![n, out_keep], cin, cin * k + if bias { k } else { 0 })
            }
            NodeOp::Conv2d { kernel, stride, padding, bias, .. } => {
                let s = &x.value;
                if s.len() != 4 {
                    return Err(GraphError::Shape { node: node.id, msg: format!("conv2d on proxy {s:?}") });
                }
                let (h, w) = match (conv_out_size(s[2], kernel, stride, padding), conv_out_size(s[3], kernel, stride, padding)) {
                    (Some(h), Some(w)) => (h, w),
                    _ => {
                        return Err(GraphError::Shape { node: node.id, msg: format!("kernel {kernel} does not fit {s:?}") })
                    }
                };
                let kk = (kernel * kernel) as u64;
                (vec![n, out_keep, h, w], cin * kk, cin * kk * k + if bias { k } else { 0 })
            }
            _ => unreachable!("walker only passes layers"),
        };
        let outputs = numel(&out);
        let flops = 2 * macs_per_out * outputs + if node.op.has_bias() { outputs } else { 0 };
        self.charge(node.id, flops, params);
        Ok(out)
    }

    fn unary(&mut self, node: &GraphNode, x: &Flow<ShapeProxy>) -> Result<ShapeProxy, GraphError> {
        self.stats.handler_calls += 1;
        let s = &x.value;
        let (out, elementwise) = match node.op {
            NodeOp::Relu | NodeOp::Sigmoid => (s.clone(), numel(s)),
            NodeOp::Flatten => (vec![s[0], s[1..].iter().product()], 0),
            NodeOp::GlobalPool => {
                if s.len() != 4 {
                    return Err(GraphError::Shape { node: node.id, msg: format!("global_pool on proxy {s:?}") });
                }
                (vec![s[0], s[1], 1, 1], numel(s))
            }
            NodeOp::MaxPool { kernel, stride, padding } => {
                if s.len() != 4 {
                    return Err(GraphError::Shape { node: node.id, msg: format!("max_pool on proxy {s:?}") });
                }
                match (conv_out_size(s[2], kernel, stride, padding), conv_out_size(s[3], kernel, stride, padding)) {
                    (Some(h), Some(w)) => {
                        let out = vec![s[0], s[1], h, w];
                        let e = numel(&out) * (kernel * kernel - 1) as u64;
                        (out, e)
                    }
                    _ => {
                        return Err(GraphError::Shape { node: node.id, msg: format!("window {kernel} does not fit {s:?}") })
                    }
                }
            }
            _ => unreachable!("walker only passes pass-through kinds"),
        };
        let flops = if self.config.count_elementwise { elementwise } else { 0 };
        self.charge(node.id, flops, 0);
        Ok(out)
    }

    fn add(&mut self, node: &GraphNode, xs: &[&Flow<ShapeProxy>]) -> Result<ShapeProxy, GraphError> {
        self.stats.handler_calls += 1;
        let s = xs[0].value.clone();
        if xs.iter().any(|f| f.value != s) {
            return Err(GraphError::Shape { node: node.id, msg: "add operands disagree".into() });
        }
        let flops = if self.config.count_elementwise { numel(&s) * (xs.len() as u64 - 1) } else { 0 };
        self.charge(node.id, flops, 0);
        Ok(s)
    }

    fn concat(&mut self, node: &GraphNode, xs: &[&Flow<ShapeProxy>]) -> Result<ShapeProxy, GraphError> {
        self.stats.handler_calls += 1;
        let mut s = xs[0].value.clone();
        s[1] = xs.iter().map(|f| f.value[1]).sum();
        self.charge(node.id, 0, 0);
        Ok(s)
    }

    fn output(&mut self, node: &GraphNode, x: &Flow<ShapeProxy>) -> Result<ShapeProxy, GraphError> {
        self.stats.handler_calls += 1;
        self.charge(node.id, 0, 0);
        Ok(x.value.clone())
    }
}

/// Cost under the default convention. `input_shape` includes the batch axis.
pub fn estimate_cost(
    graph: &CompGraph,
    input_shape: &[usize],
    mask: Option<&crate::arch::StructMask>,
) -> Result<CostReport, GraphError> {
    estimate_cost_with(graph, input_shape, mask, CostConfig::default()).map(|(r, _)| r)
}

/// Cost plus proxy instrumentation under an explicit convention.
///
/// Spatial extents of `input_shape` may differ from the graph's declared
/// input; the channel/feature axis must match.
pub fn estimate_cost_with(
    graph: &CompGraph,
    input_shape: &[usize],
    mask: Option<&crate::arch::StructMask>,
    config: CostConfig,
) -> Result<(CostReport, ProxyStats), GraphError> {
    let declared = graph.input_shape();
    let input_id = graph.nodes()[0].id;
    if input_shape.len() != declared.len() + 1 || input_shape[1] != declared[0] || input_shape.contains(&0) {
        return Err(GraphError::Shape {
            node: input_id,
            msg: format!("proxy input {input_shape:?} does not match graph input [N, {declared:?}]"),
        });
    }
    let mut proxy = Proxy { config, report: CostReport::default(), stats: ProxyStats::default(), input: input_shape.to_vec() };
    walk(graph, mask, &mut proxy)?;
    Ok((proxy.report, proxy.stats))
}

fn ratio_parts(graph: &CompGraph, arch: &ArchSpec, input_shape: &[usize]) -> Result<(CostReport, CostReport), ArchError> {
    let mask = arch.to_mask(graph)?;
    let full = estimate_cost(graph, input_shape, None)?;
    let sub = estimate_cost(graph, input_shape, Some(&mask))?;
    Ok((sub, full))
}

/// Masked FLOPs over full FLOPs.
pub fn flops_ratio(graph: &CompGraph, arch: &ArchSpec, input_shape: &[usize]) -> Result<f64, ArchError> {
    let (sub, full) = ratio_parts(graph, arch, input_shape)?;
    if full.flops == 0 {
        return Ok(1.0);
    }
    Ok(sub.flops as f64 / full.flops as f64)
}

/// Masked parameter count over full parameter count.
pub fn params_ratio(graph: &CompGraph, arch: &ArchSpec, input_shape: &[usize]) -> Result<f64, ArchError> {
    let (sub, full) = ratio_parts(graph, arch, input_shape)?;
    if full.params == 0 {
        return Ok(1.0);
    }
    Ok(sub.params as f64 / full.params as f64)
}
