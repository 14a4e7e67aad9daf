//! `stpgraph v1` model-spec format.
//!
//! ```text
//! stpgraph v1
//! # id kind [from=a,b] [key=value ...] [stage=S.U | fixed]
//! 0 input shape=1x8x8
//! 1 conv2d from=0 in=1 out=8 k=3 stride=1 pad=1 bias=1 fixed
//! 2 relu from=1
//! ```
//!
//! One node per line, in topological order. Linear and conv layers carry
//! either `stage=S.U` (prunable, unit `U` of stage `S`) or `fixed`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write;

use crate::autodiff::conv_out_size;

use super::{CompGraph, GraphError, GraphNode, NodeId, NodeOp, Stage, UnitRef};

pub const HEADER: &str = "stpgraph v1";

struct Line<'a> {
    no: usize,
    attrs: HashMap<&'a str, &'a str>,
    flags: HashSet<&'a str>,
}

impl<'a> Line<'a> {
    fn err(&self, msg: impl Into<String>) -> GraphError {
        GraphError::Parse { line: self.no, msg: msg.into() }
    }

    fn usize(&self, key: &str) -> Result<usize, GraphError> {
        let raw = self.attrs.get(key).ok_or_else(|| self.err(format!("missing attribute `{key}`")))?;
        raw.parse().map_err(|_| self.err(format!("attribute `{key}` is not a non-negative integer: {raw}")))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, GraphError> {
        if self.attrs.contains_key(key) {
            self.usize(key)
        } else {
            Ok(default)
        }
    }

    fn flag(&self, key: &str) -> Result<bool, GraphError> {
        match self.attrs.get(key) {
            None => Ok(false),
            Some(&"1") | Some(&"true") => Ok(true),
            Some(&"0") | Some(&"false") => Ok(false),
            Some(v) => Err(self.err(format!("attribute `{key}` must be 0/1, got {v}"))),
        }
    }
}

fn allowed_keys(kind: &str) -> &'static [&'static str] {
    match kind {
        "input" => &["shape"],
        "linear" => &["from", "in", "out", "bias", "stage"],
        "conv2d" => &["from", "in", "out", "k", "stride", "pad", "bias", "stage"],
        "max_pool" => &["from", "k", "stride", "pad"],
        _ => &["from"],
    }
}

pub fn parse(text: &str) -> Result<CompGraph, GraphError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, HEADER)) => {}
        Some((no, other)) => {
            return Err(GraphError::Parse { line: no, msg: format!("expected header `{HEADER}`, got `{other}`") })
        }
        None => return Err(GraphError::Parse { line: 1, msg: "empty model spec".into() }),
    }

    let mut nodes = Vec::new();
    let mut seen: HashMap<NodeId, usize> = HashMap::new();
    let mut pending: Vec<(usize, NodeId, NodeId)> = Vec::new();
    for (no, raw) in lines {
        let mut tokens = raw.split_whitespace();
        let id_tok = tokens.next().unwrap_or_default();
        let id: NodeId = id_tok
            .parse()
            .map_err(|_| GraphError::Parse { line: no, msg: format!("node id must be an integer, got `{id_tok}`") })?;
        let kind = tokens
            .next()
            .ok_or_else(|| GraphError::Parse { line: no, msg: "missing node kind".into() })?;
        let mut line = Line { no, attrs: HashMap::new(), flags: HashSet::new() };
        for tok in tokens {
            match tok.split_once('=') {
                Some((k, v)) => {
                    if line.attrs.insert(k, v).is_some() {
                        return Err(line.err(format!("duplicate attribute `{k}`")));
                    }
                }
                None => {
                    line.flags.insert(tok);
                }
            }
        }
        let allowed = allowed_keys(kind);
        if let Some(k) = line.attrs.keys().find(|k| !allowed.contains(k)) {
            return Err(line.err(format!("attribute `{k}` not valid for {kind}")));
        }
        if let Some(f) = line.flags.iter().find(|f| **f != "fixed") {
            return Err(line.err(format!("unknown flag `{f}`")));
        }

        let inputs: Vec<NodeId> = match line.attrs.get("from") {
            None => Vec::new(),
            Some(list) => list
                .split(',')
                .map(|s| s.parse().map_err(|_| line.err(format!("bad input id `{s}`"))))
                .collect::<Result<_, _>>()?,
        };
        for &src in &inputs {
            if !seen.contains_key(&src) {
                pending.push((no, id, src));
            }
        }

        let op = match kind {
            "input" => {
                let raw = line.attrs.get("shape").ok_or_else(|| line.err("input needs `shape`"))?;
                let shape = raw
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| line.err(format!("bad shape `{raw}`"))))
                    .collect::<Result<Vec<_>, _>>()?;
                NodeOp::Input { shape }
            }
            "linear" => NodeOp::Linear {
                in_features: line.usize("in")?,
                out_features: line.usize("out")?,
                bias: line.flag("bias")?,
            },
            "conv2d" => NodeOp::Conv2d {
                in_channels: line.usize("in")?,
                out_channels: line.usize("out")?,
                kernel: line.usize("k")?,
                stride: line.usize_or("stride", 1)?,
                padding: line.usize_or("pad", 0)?,
                bias: line.flag("bias")?,
            },
            "max_pool" => {
                let kernel = line.usize("k")?;
                NodeOp::MaxPool { kernel, stride: line.usize_or("stride", kernel)?, padding: line.usize_or("pad", 0)? }
            }
            "add" => NodeOp::Add,
            "concat" => NodeOp::Concat,
            "relu" => NodeOp::Relu,
            "sigmoid" => NodeOp::Sigmoid,
            "flatten" => NodeOp::Flatten,
            "global_pool" => NodeOp::GlobalPool,
            "output" => NodeOp::Output,
            other => return Err(line.err(format!("unknown node kind `{other}`"))),
        };

        let fixed = line.flags.contains("fixed");
        let unit = match line.attrs.get("stage") {
            None => None,
            Some(raw) => {
                let (s, u) = raw.split_once('.').ok_or_else(|| line.err(format!("stage must be S.U, got `{raw}`")))?;
                let parse = |v: &str| v.parse::<usize>().map_err(|_| line.err(format!("stage must be S.U, got `{raw}`")));
                Some(UnitRef { stage: parse(s)?, unit: parse(u)? })
            }
        };
        if op.is_layer() {
            match (fixed, unit) {
                (true, Some(_)) => return Err(line.err("a layer cannot be both `fixed` and in a stage")),
                (false, None) => return Err(line.err("layer needs `stage=S.U` or `fixed`")),
                _ => {}
            }
        } else if fixed {
            return Err(line.err(format!("`fixed` only applies to layers, not {kind}")));
        }

        if seen.insert(id, nodes.len()).is_some() {
            return Err(line.err(format!("duplicate node id {id}")));
        }
        nodes.push(GraphNode { id, op, inputs, prunable: unit.is_some(), unit });
    }

    if let Some(&(no, id, src)) = pending.first() {
        let msg = if seen.contains_key(&src) {
            format!("node {id} reads node {src}, which is defined later (cycle or non-topological order)")
        } else {
            format!("node {id} reads undefined node {src}")
        };
        return Err(GraphError::Parse { line: no, msg });
    }
    validate(nodes)
}

fn vfail(node: NodeId, msg: impl Into<String>) -> GraphError {
    GraphError::Validation { node, msg: msg.into() }
}

fn sfail(node: NodeId, msg: impl Into<String>) -> GraphError {
    GraphError::Shape { node, msg: msg.into() }
}

pub fn validate(nodes: Vec<GraphNode>) -> Result<CompGraph, GraphError> {
    let mut index = HashMap::new();
    let mut out_shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
    let mut input_shape = None;
    let mut outputs = 0;
    let mut units: BTreeMap<usize, BTreeMap<usize, Vec<NodeId>>> = BTreeMap::new();

    for (pos, node) in nodes.iter().enumerate() {
        let id = node.id;
        for src in &node.inputs {
            if !index.contains_key(src) {
                return Err(vfail(id, format!("edge from {src} does not reference an earlier node")));
            }
        }
        if index.insert(id, pos).is_some() {
            return Err(vfail(id, "duplicate node id"));
        }
        let arity_ok = match node.op {
            NodeOp::Input { .. } => node.inputs.is_empty(),
            NodeOp::Add | NodeOp::Concat => node.inputs.len() >= 2,
            _ => node.inputs.len() == 1,
        };
        if !arity_ok {
            return Err(vfail(id, format!("{} cannot take {} inputs", node.op.name(), node.inputs.len())));
        }
        if node.prunable != node.unit.is_some() || (node.prunable && !node.op.is_layer()) {
            return Err(vfail(id, "only stage-assigned linear/conv2d layers are prunable"));
        }
        if let Some(u) = node.unit {
            units.entry(u.stage).or_default().entry(u.unit).or_default().push(id);
        }

        let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|s| &out_shapes[index[s]]).collect();
        let shape = match &node.op {
            NodeOp::Input { shape } => {
                if shape.is_empty() || shape.contains(&0) {
                    return Err(vfail(id, "input shape must be non-empty and positive"));
                }
                if input_shape.replace(shape.clone()).is_some() {
                    return Err(vfail(id, "graph has more than one input"));
                }
                shape.clone()
            }
            NodeOp::Linear { in_features, out_features, .. } => {
                if *in_features == 0 || *out_features == 0 {
                    return Err(vfail(id, "linear dims must be positive"));
                }
                if ins[0].len() != 1 || ins[0][0] != *in_features {
                    return Err(sfail(id, format!("linear expects [{in_features}], got {:?}", ins[0])));
                }
                vec![*out_features]
            }
            NodeOp::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
                if *in_channels == 0 || *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return Err(vfail(id, "conv2d dims must be positive"));
                }
                let s = ins[0];
                if s.len() != 3 || s[0] != *in_channels {
                    return Err(sfail(id, format!("conv2d expects [{in_channels}, H, W], got {s:?}")));
                }
                match (conv_out_size(s[1], *kernel, *stride, *padding), conv_out_size(s[2], *kernel, *stride, *padding)) {
                    (Some(h), Some(w)) => vec![*out_channels, h, w],
                    _ => return Err(sfail(id, format!("kernel {kernel} does not fit {s:?}"))),
                }
            }
            NodeOp::MaxPool { kernel, stride, padding } => {
                let s = ins[0];
                if *kernel == 0 || *stride == 0 {
                    return Err(vfail(id, "max_pool dims must be positive"));
                }
                if s.len() != 3 {
                    return Err(sfail(id, format!("max_pool expects [C, H, W], got {s:?}")));
                }
                match (conv_out_size(s[1], *kernel, *stride, *padding), conv_out_size(s[2], *kernel, *stride, *padding)) {
                    (Some(h), Some(w)) => vec![s[0], h, w],
                    _ => return Err(sfail(id, format!("window {kernel} does not fit {s:?}"))),
                }
            }
            NodeOp::GlobalPool => {
                let s = ins[0];
                if s.len() != 3 {
                    return Err(sfail(id, format!("global_pool expects [C, H, W], got {s:?}")));
                }
                vec![s[0], 1, 1]
            }
            NodeOp::Flatten => vec![ins[0].iter().product()],
            NodeOp::Relu | NodeOp::Sigmoid | NodeOp::Output => ins[0].clone(),
            NodeOp::Add => {
                if ins.iter().any(|s| *s != ins[0]) {
                    return Err(sfail(id, format!("add operands disagree: {ins:?}")));
                }
                ins[0].clone()
            }
            NodeOp::Concat => {
                let first = ins[0];
                if ins.iter().any(|s| s.len() != first.len() || s[1..] != first[1..]) {
                    return Err(sfail(id, format!("concat operands disagree beyond channels: {ins:?}")));
                }
                let mut s = first.clone();
                s[0] = ins.iter().map(|s| s[0]).sum();
                s
            }
        };
        if node.op == NodeOp::Output {
            outputs += 1;
        }
        out_shapes.push(shape);
    }

    let input_shape = input_shape.ok_or_else(|| GraphError::Stage("graph has no input node".into()))?;
    if outputs != 1 {
        return Err(GraphError::Stage(format!("graph needs exactly one output node, found {outputs}")));
    }

    let mut stages = Vec::new();
    for (expect_s, (s, us)) in units.into_iter().enumerate() {
        if s != expect_s {
            return Err(GraphError::Stage(format!("stage {expect_s} is missing (next is {s})")));
        }
        let mut stage = Stage::default();
        for (expect_u, (u, ids)) in us.into_iter().enumerate() {
            if u != expect_u {
                return Err(GraphError::Stage(format!("stage {s}: unit {expect_u} is missing (next is {u})")));
            }
            stage.units.push(ids);
        }
        stages.push(stage);
    }

    Ok(CompGraph { nodes, index, stages, input_shape, out_shapes })
}

pub fn to_text(graph: &CompGraph) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for n in graph.nodes() {
        let _ = write!(out, "{} {}", n.id, n.op.name());
        if !n.inputs.is_empty() {
            let ids: Vec<String> = n.inputs.iter().map(ToString::to_string).collect();
            let _ = write!(out, " from={}", ids.join(","));
        }
        match &n.op {
            NodeOp::Input { shape } => {
                let dims: Vec<String> = shape.iter().map(ToString::to_string).collect();
                let _ = write!(out, " shape={}", dims.join("x"));
            }
            NodeOp::Linear { in_features, out_features, bias } => {
                let _ = write!(out, " in={in_features} out={out_features} bias={}", u8::from(*bias));
            }
            NodeOp::Conv2d { in_channels, out_channels, kernel, stride, padding, bias } => {
                let _ = write!(
                    out,
                    " in={in_channels} out={out_channels} k={kernel} stride={stride} pad={padding} bias={}",
                    u8::from(*bias)
                );
            }
            NodeOp::MaxPool { kernel, stride, padding } => {
                let _ = write!(out, " k={kernel} stride={stride} pad={padding}");
            }
            _ => {}
        }
        if let Some(u) = n.unit {
            let _ = write!(out, " stage={}.{}", u.stage, u.unit);
        } else if n.op.is_layer() {
            out.push_str(" fixed");
        }
        out.push('\n');
    }
    out
}
