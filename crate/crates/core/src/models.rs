//! Bundled model graphs and a small builder for writing new ones in code.

use crate::graph::{CompGraph, GraphError, GraphNode, NodeId, NodeOp, UnitRef};

/// Appends nodes with consecutive ids; [`GraphBuilder::build`] validates.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<GraphNode>,
}

pub fn conv(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> NodeOp {
    NodeOp::Conv2d { in_channels: cin, out_channels: cout, kernel, stride, padding, bias }
}

pub fn linear(fin: usize, fout: usize, bias: bool) -> NodeOp {
    NodeOp::Linear { in_features: fin, out_features: fout, bias }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, op: NodeOp, inputs: &[NodeId], unit: Option<UnitRef>) -> NodeId {
        let id = self.nodes.len();
        let prunable = unit.is_some();
        self.nodes.push(GraphNode { id, op, inputs: inputs.to_vec(), prunable, unit });
        id
    }

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push(NodeOp::Input { shape: shape.to_vec() }, &[], None)
    }

    /// Layer in unit `unit` of stage `stage`.
    pub fn prunable(&mut self, op: NodeOp, x: NodeId, stage: usize, unit: usize) -> NodeId {
        self.push(op, &[x], Some(UnitRef { stage, unit }))
    }

    pub fn fixed(&mut self, op: NodeOp, x: NodeId) -> NodeId {
        self.push(op, &[x], None)
    }

    pub fn op(&mut self, op: NodeOp, inputs: &[NodeId]) -> NodeId {
        self.push(op, inputs, None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.op(NodeOp::Relu, &[x])
    }

    pub fn build(self) -> Result<CompGraph, GraphError> {
        CompGraph::from_nodes(self.nodes)
    }
}

/// Bottleneck ResNet-50 for 32×32 inputs and 100 classes.
///
/// The stem (7×7/2 conv, 3×3/2 max pool) and the classifier are fixed;
/// the 52 convolutions of the 16 bottleneck blocks are prunable, one unit
/// per block, in stages of 3, 4, 6 and 3 blocks. Stride sits on the first
/// 1×1 conv, and every stage opens with a 1×1 projection shortcut.
pub fn resnet50_cifar() -> CompGraph {
    let mut b = GraphBuilder::new();
    let x = b.input(&[3, 32, 32]);
    let stem = b.fixed(conv(3, 64, 7, 2, 3, false), x);
    let stem = b.relu(stem);
    let mut h = b.op(NodeOp::MaxPool { kernel: 3, stride: 2, padding: 1 }, &[stem]);
    let mut cin = 64;
    for (s, (&blocks, &planes)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        let out = planes * 4;
        for u in 0..blocks {
            let stride = if u == 0 && s > 0 { 2 } else { 1 };
            let c1 = b.prunable(conv(cin, planes, 1, stride, 0, false), h, s, u);
            let a1 = b.relu(c1);
            let c2 = b.prunable(conv(planes, planes, 3, 1, 1, false), a1, s, u);
            let a2 = b.relu(c2);
            let c3 = b.prunable(conv(planes, out, 1, 1, 0, false), a2, s, u);
            let short = if u == 0 { b.prunable(conv(cin, out, 1, stride, 0, false), h, s, u) } else { h };
            let sum = b.op(NodeOp::Add, &[c3, short]);
            h = b.relu(sum);
            cin = out;
        }
    }
    let pooled = b.op(NodeOp::GlobalPool, &[h]);
    let flat = b.op(NodeOp::Flatten, &[pooled]);
    let logits = b.fixed(linear(cin, 100, true), flat);
    b.op(NodeOp::Output, &[logits]);
    b.build().expect("bundled model is valid")
}

/// Residual CNN without normalization layers.
///
/// A fixed 3×3 stem, then one stage per entry of `widths` with `blocks`
/// basic blocks each (stride 2 from the second stage on), global pooling
/// and a fixed linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualCnn {
    pub channels: usize,
    pub side: usize,
    pub stem: usize,
    pub stem_stride: usize,
    pub widths: Vec<usize>,
    pub blocks: usize,
    pub classes: usize,
}

impl ResidualCnn {
    pub fn build(&self) -> CompGraph {
        let mut b = GraphBuilder::new();
        let x = b.input(&[self.channels, self.side, self.side]);
        let s0 = b.fixed(conv(self.channels, self.stem, 3, self.stem_stride, 1, true), x);
        let mut h = b.relu(s0);
        let mut cin = self.stem;
        for (s, &width) in self.widths.iter().enumerate() {
            for u in 0..self.blocks {
                let stride = if u == 0 && s > 0 { 2 } else { 1 };
                let c1 = b.prunable(conv(cin, width, 3, stride, 1, true), h, s, u);
                let a1 = b.relu(c1);
                let c2 = b.prunable(conv(width, width, 3, 1, 1, true), a1, s, u);
                let short = if u == 0 { b.prunable(conv(cin, width, 1, stride, 0, true), h, s, u) } else { h };
                let sum = b.op(NodeOp::Add, &[c2, short]);
                h = b.relu(sum);
                cin = width;
            }
        }
        let pooled = b.op(NodeOp::GlobalPool, &[h]);
        let flat = b.op(NodeOp::Flatten, &[pooled]);
        let logits = b.fixed(linear(cin, self.classes, true), flat);
        b.op(NodeOp::Output, &[logits]);
        b.build().expect("bundled model is valid")
    }
}

/// The desk-scale CNN for 1×8×8 inputs and 10 classes.
pub fn toy_cnn() -> CompGraph {
    ResidualCnn { channels: 1, side: 8, stem: 8, stem_stride: 2, widths: vec![8, 16, 32], blocks: 2, classes: 10 }.build()
}

/// Two hidden linear layers (one stage each) and a fixed linear classifier.
pub fn mlp(inputs: usize, hidden: usize, outputs: usize) -> CompGraph {
    let mut b = GraphBuilder::new();
    let x = b.input(&[inputs]);
    let h1 = b.prunable(linear(inputs, hidden, true), x, 0, 0);
    let a1 = b.relu(h1);
    let h2 = b.prunable(linear(hidden, hidden, true), a1, 1, 0);
    let a2 = b.relu(h2);
    let y = b.fixed(linear(hidden, outputs, true), a2);
    b.op(NodeOp::Output, &[y]);
    b.build().expect("bundled model is valid")
}

pub const BUNDLED: [&str; 3] = ["resnet50-cifar", "toy-cnn", "mlp"];

/// Looks up a bundled model by name.
pub fn bundled(name: &str) -> Option<CompGraph> {
    match name {
        "resnet50-cifar" => Some(resnet50_cifar()),
        "toy-cnn" => Some(toy_cnn()),
        "mlp" => Some(mlp(64, 32, 10)),
        _ => None,
    }
}
