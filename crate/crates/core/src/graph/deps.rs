//! Channel dependency groups.
//!
//! Layers whose outputs meet at an `add` (directly or through channel-
//! preserving kinds and other adds) must keep the same output channels.
//! Concat consumers slice per producer, so concat does not couple.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{CompGraph, GraphError, NodeId, NodeOp};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyGroup {
    /// Prunable layers sharing kept-channel counts.
    pub members: BTreeSet<NodeId>,
    /// The first `add` node that forced the coupling; `None` for singletons.
    pub reason: Option<NodeId>,
    /// The group also feeds an `add` together with a fixed layer or the
    /// graph input, so its channels cannot be pruned.
    pub pinned: bool,
}

/// Where the channels of a value come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Origin {
    Prunable(NodeId),
    /// Fixed layer or graph input.
    Fixed(NodeId),
    /// Concat output; cannot be coupled through an add.
    Composite(NodeId),
}

struct UnionFind {
    parent: HashMap<NodeId, NodeId>,
}

impl UnionFind {
    fn find(&mut self, x: NodeId) -> NodeId {
        let p = self.parent[&x];
        if p == x {
            return x;
        }
        let root = self.find(p);
        self.parent.insert(x, root);
        root
    }

    fn union(&mut self, a: NodeId, b: NodeId) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller id becomes the root so results are order-independent.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent.insert(hi, lo);
        }
    }
}

pub fn extract_dependency_groups(graph: &CompGraph) -> Result<Vec<DependencyGroup>, GraphError> {
    let mut uf = UnionFind { parent: graph.prunable_layers().map(|n| (n.id, n.id)).collect() };
    let mut origins: HashMap<NodeId, BTreeSet<Origin>> = HashMap::new();
    let mut reason: HashMap<NodeId, NodeId> = HashMap::new();
    let mut pinned_members: BTreeSet<NodeId> = BTreeSet::new();

    for node in graph.nodes() {
        let id = node.id;
        let set: BTreeSet<Origin> = match &node.op {
            NodeOp::Input { .. } => [Origin::Fixed(id)].into(),
            NodeOp::Linear { .. } | NodeOp::Conv2d { .. } => {
                if node.prunable {
                    [Origin::Prunable(id)].into()
                } else {
                    [Origin::Fixed(id)].into()
                }
            }
            NodeOp::Concat => [Origin::Composite(id)].into(),
            op if op.is_pass_through() => origins[&node.inputs[0]].clone(),
            NodeOp::Output => BTreeSet::new(),
            NodeOp::Add => {
                let channels: Vec<usize> = node.inputs.iter().map(|s| graph.out_shape(*s)[0]).collect();
                if channels.iter().any(|c| *c != channels[0]) {
                    return Err(GraphError::Dependency {
                        node: id,
                        msg: format!("add producers have mismatched channel counts {channels:?}"),
                    });
                }
                let mut set = BTreeSet::new();
                for src in &node.inputs {
                    set.extend(origins[src].iter().copied());
                }
                if let Some(Origin::Composite(c)) = set.iter().find(|o| matches!(o, Origin::Composite(_))) {
                    return Err(GraphError::Dependency {
                        node: id,
                        msg: format!("add over the output of concat {c} is not supported"),
                    });
                }
                let layers: Vec<NodeId> = set
                    .iter()
                    .filter_map(|o| if let Origin::Prunable(l) = o { Some(*l) } else { None })
                    .collect();
                for pair in layers.windows(2) {
                    uf.union(pair[0], pair[1]);
                }
                for l in &layers {
                    reason.entry(*l).or_insert(id);
                }
                if set.iter().any(|o| matches!(o, Origin::Fixed(_))) {
                    pinned_members.extend(layers.iter().copied());
                }
                set
            }
            _ => unreachable!("all kinds handled"),
        };
        origins.insert(id, set);
    }

    let mut groups: BTreeMap<NodeId, DependencyGroup> = BTreeMap::new();
    for node in graph.prunable_layers() {
        let root = uf.find(node.id);
        let g = groups.entry(root).or_insert_with(|| DependencyGroup {
            members: BTreeSet::new(),
            reason: None,
            pinned: false,
        });
        g.members.insert(node.id);
        if let Some(r) = reason.get(&node.id) {
            g.reason = Some(g.reason.map_or(*r, |old: NodeId| if graph.position(*r) < graph.position(old) { *r } else { old }));
        }
        g.pinned |= pinned_members.contains(&node.id);
    }
    Ok(groups.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::super::build_graph;
    use super::*;

    #[test]
    fn residual_block_couples_branch_and_shortcut() {
        let g = build_graph(
            "stpgraph v1
0 input shape=2x4x4
1 conv2d from=0 in=2 out=4 k=3 pad=1 stage=0.0
2 relu from=1
3 conv2d from=2 in=4 out=4 k=3 pad=1 stage=0.0
4 conv2d from=0 in=2 out=4 k=1 stage=0.0
5 add from=3,4
6 relu from=5
7 output from=6
",
        )
        .unwrap();
        let groups = extract_dependency_groups(&g).unwrap();
        assert_eq!(groups.len(), 2);
        let coupled = groups.iter().find(|g| g.members.len() == 2).unwrap();
        assert_eq!(coupled.members, [3, 4].into());
        assert_eq!(coupled.reason, Some(5));
        assert!(!coupled.pinned);
    }

    #[test]
    fn chain_is_all_singletons() {
        let g = build_graph(
            "stpgraph v1
0 input shape=1x4x4
1 conv2d from=0 in=1 out=2 k=1 stage=0.0
2 conv2d from=1 in=2 out=2 k=1 stage=0.1
3 conv2d from=2 in=2 out=2 k=1 stage=0.2
4 output from=3
",
        )
        .unwrap();
        let groups = extract_dependency_groups(&g).unwrap();
        assert_eq!(groups.len(), 3);
        assert!(groups.iter().all(|g| g.members.len() == 1 && g.reason.is_none()));
    }

    #[test]
    fn concat_keeps_producers_independent() {
        let g = build_graph(
            "stpgraph v1
0 input shape=1x4x4
1 conv2d from=0 in=1 out=2 k=1 stage=0.0
2 conv2d from=0 in=1 out=3 k=1 stage=0.0
3 concat from=1,2
4 output from=3
",
        )
        .unwrap();
        assert_eq!(extract_dependency_groups(&g).unwrap().len(), 2);
    }

    #[test]
    fn identity_shortcut_pins_group() {
        let g = build_graph(
            "stpgraph v1
0 input shape=2x4x4
1 conv2d from=0 in=2 out=2 k=1 stage=0.0
2 add from=1,0
3 output from=2
",
        )
        .unwrap();
        let groups = extract_dependency_groups(&g).unwrap();
        assert!(groups[0].pinned);
    }
}
