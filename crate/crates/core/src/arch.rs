//! Depth × width architecture space over a [`CompGraph`].
//!
//! An [`ArchSpec`] holds, per stage, the number of retained units and one
//! width ratio. Its text form is the nested tuple
//! `((2, 3, 4, 2), (0.3, 0.3, 0.3, 0.7))`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::graph::{self, CompGraph, CostConfig, CostReport, DependencyGroup, GraphError, NodeId};

/// Default attempt cap for rejection sampling.
pub const DEFAULT_ATTEMPTS: usize = 100_000;

/// Default relative half-width of the FLOPs acceptance band.
pub const DEFAULT_BAND: f64 = 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("architecture has {got} stages, graph has {expected}")]
    StageMismatch { expected: usize, got: usize },
    #[error("stage {stage}: depth {depth} outside 1..={max}")]
    Depth { stage: usize, depth: usize, max: usize },
    #[error("stage {stage}: width {width} is not on the grid")]
    Width { stage: usize, width: f64 },
    #[error("invalid width grid: {0}")]
    Grid(String),
    #[error("no architecture with FLOPs ratio in [{lo:.4}, {hi:.4}] after {attempts} draws (nearest {nearest:.4})")]
    Infeasible { lo: f64, hi: f64, attempts: usize, nearest: f64 },
    #[error("cannot parse architecture `{0}`")]
    Parse(String),
    #[error("dependency group {members:?} spans stages")]
    GroupSpansStages { members: Vec<NodeId> },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug)]
pub struct WidthGrid {
    ratios: Vec<f64>,
}

impl Default for WidthGrid {
    fn default() -> Self {
        Self { ratios: vec![0.3, 0.5, 0.7, 0.9, 1.0] }
    }
}

impl WidthGrid {
    pub fn new(ratios: Vec<f64>) -> Result<Self, ArchError> {
        if ratios.is_empty() {
            return Err(ArchError::Grid("empty".into()));
        }
        if ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ArchError::Grid(format!("{ratios:?} is not strictly increasing")));
        }
        if ratios[0] <= 0.0 || *ratios.last().expect("non-empty") != 1.0 {
            return Err(ArchError::Grid(format!("{ratios:?} must lie in (0, 1] and end at 1.0")));
        }
        Ok(Self { ratios })
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    fn contains(&self, w: f64) -> bool {
        self.ratios.contains(&w)
    }
}

/// Nested-tuple architecture: retained units and width ratio per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub depths: Vec<usize>,
    pub widths: Vec<f64>,
}

impl Eq for ArchSpec {}

impl Hash for ArchSpec {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.depths.hash(state);
        for w in &self.widths {
            w.to_bits().hash(state);
        }
    }
}

fn write_tuple<T>(f: &mut fmt::Formatter<'_>, items: &[T], fmt_one: impl Fn(&T) -> String) -> fmt::Result {
    let parts: Vec<String> = items.iter().map(fmt_one).collect();
    if parts.len() == 1 {
        write!(f, "({},)", parts[0])
    } else {
        write!(f, "({})", parts.join(", "))
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        write_tuple(f, &self.depths, |d| d.to_string())?;
        f.write_str(", ")?;
        write_tuple(f, &self.widths, |w| format!("{w:?}"))?;
        f.write_str(")")
    }
}

/// Splits `(a, b, c)` into its top-level items.
fn tuple_items(s: &str) -> Option<Vec<&str>> {
    let inner = s.trim().strip_prefix('(')?.strip_suffix(')')?;
    let mut items = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, ch) in inner.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                items.push(inner[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
        if depth < 0 {
            return None;
        }
    }
    if depth != 0 {
        return None;
    }
    let last = inner[start..].trim();
    if !last.is_empty() {
        items.push(last);
    }
    Some(items)
}

impl FromStr for ArchSpec {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ArchError::Parse(s.to_string());
        let outer = tuple_items(s).ok_or_else(bad)?;
        let [d, w] = outer.as_slice() else { return Err(bad()) };
        let depths = tuple_items(d)
            .ok_or_else(bad)?
            .iter()
            .map(|v| v.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        let widths = tuple_items(w)
            .ok_or_else(bad)?
            .iter()
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(bad))
            .collect::<Result<Vec<_>, _>>()?;
        if depths.is_empty() || depths.len() != widths.len() {
            return Err(bad());
        }
        Ok(Self { depths, widths })
    }
}

impl serde::Serialize for ArchSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for ArchSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl ArchSpec {
    pub fn full(graph: &CompGraph) -> Self {
        let sizes = graph.stage_sizes();
        Self { widths: vec![1.0; sizes.len()], depths: sizes }
    }

    pub fn validate(&self, graph: &CompGraph, grid: &WidthGrid) -> Result<(), ArchError> {
        self.check_structure(graph)?;
        for (stage, &width) in self.widths.iter().enumerate() {
            if !grid.contains(width) {
                return Err(ArchError::Width { stage, width });
            }
        }
        Ok(())
    }

    fn check_structure(&self, graph: &CompGraph) -> Result<(), ArchError> {
        let sizes = graph.stage_sizes();
        if self.depths.len() != sizes.len() || self.widths.len() != sizes.len() {
            return Err(ArchError::StageMismatch { expected: sizes.len(), got: self.depths.len() });
        }
        for (stage, (&depth, &max)) in self.depths.iter().zip(&sizes).enumerate() {
            if depth == 0 || depth > max {
                return Err(ArchError::Depth { stage, depth, max });
            }
        }
        for (stage, &width) in self.widths.iter().enumerate() {
            if !(width > 0.0 && width <= 1.0) {
                return Err(ArchError::Width { stage, width });
            }
        }
        Ok(())
    }

    /// Mask realizing this architecture on `graph`; see [`arch_to_mask`].
    pub fn to_mask(&self, graph: &CompGraph) -> Result<StructMask, ArchError> {
        let groups = graph::extract_dependency_groups(graph)?;
        mask_with_groups(self, graph, &groups)
    }
}

/// Channels kept by a width ratio: round half up, never below one.
pub fn kept_channels(width: f64, channels: usize) -> usize {
    // The epsilon absorbs products like 0.9 * 5 landing just under 4.5.
    ((width * channels as f64 + 0.5 + 1e-9).floor() as usize).clamp(1, channels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerMask {
    pub kept: bool,
    /// Leading output channels retained.
    pub channels: usize,
}

/// Structured mask over prunable layers.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct StructMask {
    layers: BTreeMap<NodeId, LayerMask>,
}

impl StructMask {
    pub fn from_layers(layers: BTreeMap<NodeId, LayerMask>) -> Self {
        Self { layers }
    }

    pub fn full(graph: &CompGraph) -> Self {
        let layers = graph
            .prunable_layers()
            .map(|n| (n.id, LayerMask { kept: true, channels: n.op.out_channels().expect("layer") }))
            .collect();
        Self { layers }
    }

    pub fn layer(&self, id: NodeId) -> Option<&LayerMask> {
        self.layers.get(&id)
    }

    pub fn layers(&self) -> &BTreeMap<NodeId, LayerMask> {
        &self.layers
    }

    /// Compatibility with `graph`: one entry per prunable layer, channel
    /// counts within range, first unit of every stage kept.
    pub fn check(&self, graph: &CompGraph) -> Result<(), GraphError> {
        let mut expected = 0;
        for node in graph.prunable_layers() {
            expected += 1;
            let lm = self
                .layers
                .get(&node.id)
                .ok_or_else(|| GraphError::Mask(format!("no entry for prunable layer {}", node.id)))?;
            let full = node.op.out_channels().expect("layer");
            if lm.channels == 0 || lm.channels > full {
                return Err(GraphError::Mask(format!(
                    "layer {} keeps {} of {full} channels",
                    node.id, lm.channels
                )));
            }
            if node.unit.is_some_and(|u| u.unit == 0) && !lm.kept {
                return Err(GraphError::Mask(format!("layer {} is in the first unit of its stage and must be kept", node.id)));
            }
        }
        if expected != self.layers.len() {
            return Err(GraphError::Mask(format!(
                "mask has {} entries for {expected} prunable layers",
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// True when every layer/channel kept by `other` is kept here.
    pub fn contains(&self, other: &StructMask) -> bool {
        other.layers.iter().all(|(id, o)| {
            !o.kept || self.layers.get(id).is_some_and(|s| s.kept && s.channels >= o.channels)
        })
    }

    /// Whether the parameter `weight[o, i, ..]` of layer `id` survives,
    /// given the kept input channels of that layer.
    pub fn kept_out(&self, id: NodeId) -> Option<usize> {
        self.layers.get(&id).map(|l| if l.kept { l.channels } else { 0 })
    }
}

fn mask_with_groups(arch: &ArchSpec, graph: &CompGraph, groups: &[DependencyGroup]) -> Result<StructMask, ArchError> {
    arch.check_structure(graph)?;
    let mut layers = BTreeMap::new();
    for g in groups {
        let stages: HashSet<usize> = g
            .members
            .iter()
            .map(|id| graph.node(*id).and_then(|n| n.unit).expect("prunable").stage)
            .collect();
        if stages.len() != 1 {
            return Err(ArchError::GroupSpansStages { members: g.members.iter().copied().collect() });
        }
        let stage = *stages.iter().next().expect("one stage");
        for id in &g.members {
            let node = graph.node(*id).expect("member exists");
            let unit = node.unit.expect("prunable").unit;
            let full = node.op.out_channels().expect("layer");
            let channels = if g.pinned { full } else { kept_channels(arch.widths[stage], full) };
            layers.insert(*id, LayerMask { kept: unit < arch.depths[stage], channels });
        }
    }
    Ok(StructMask { layers })
}

/// Keeps the earliest `depths[s]` units of each stage and the first
/// `round_half_up(widths[s] · C)` output channels of every kept layer.
pub fn arch_to_mask(arch: &ArchSpec, graph: &CompGraph) -> Result<StructMask, ArchError> {
    arch.to_mask(graph)
}

/// Architecture space bound to one graph, with cached dependency groups
/// and full-network cost.
#[derive(Clone, Debug)]
pub struct ArchSpace<'g> {
    graph: &'g CompGraph,
    grid: WidthGrid,
    groups: Vec<DependencyGroup>,
    input_shape: Vec<usize>,
    cost: CostConfig,
    full: CostReport,
}

impl<'g> ArchSpace<'g> {
    /// Space over `graph` with a batch-1 cost probe at the declared input.
    pub fn new(graph: &'g CompGraph, grid: WidthGrid) -> Result<Self, ArchError> {
        let mut input_shape = vec![1];
        input_shape.extend_from_slice(graph.input_shape());
        Self::with_cost(graph, grid, input_shape, CostConfig::default())
    }

    pub fn with_cost(
        graph: &'g CompGraph,
        grid: WidthGrid,
        input_shape: Vec<usize>,
        cost: CostConfig,
    ) -> Result<Self, ArchError> {
        let groups = graph::extract_dependency_groups(graph)?;
        let (full, _) = graph::estimate_cost_with(graph, &input_shape, None, cost)?;
        Ok(Self { graph, grid, groups, input_shape, cost, full })
    }

    pub fn graph(&self) -> &'g CompGraph {
        self.graph
    }

    pub fn grid(&self) -> &WidthGrid {
        &self.grid
    }

    pub fn full_cost(&self) -> &CostReport {
        &self.full
    }

    pub fn full_arch(&self) -> ArchSpec {
        ArchSpec::full(self.graph)
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<(), ArchError> {
        arch.validate(self.graph, &self.grid)
    }

    pub fn mask(&self, arch: &ArchSpec) -> Result<StructMask, ArchError> {
        mask_with_groups(arch, self.graph, &self.groups)
    }

    pub fn cost(&self, arch: &ArchSpec) -> Result<CostReport, ArchError> {
        let mask = self.mask(arch)?;
        Ok(graph::estimate_cost_with(self.graph, &self.input_shape, Some(&mask), self.cost)?.0)
    }

    pub fn flops_ratio(&self, arch: &ArchSpec) -> Result<f64, ArchError> {
        let c = self.cost(arch)?;
        Ok(if self.full.flops == 0 { 1.0 } else { c.flops as f64 / self.full.flops as f64 })
    }

    pub fn params_ratio(&self, arch: &ArchSpec) -> Result<f64, ArchError> {
        let c = self.cost(arch)?;
        Ok(if self.full.params == 0 { 1.0 } else { c.params as f64 / self.full.params as f64 })
    }

    /// Uniform draw over depths and widths, ignoring cost.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ArchSpec {
        let sizes = self.graph.stage_sizes();
        let depths = sizes.iter().map(|&n| rng.random_range(1..=n)).collect();
        let widths = sizes
            .iter()
            .map(|_| self.grid.ratios[rng.random_range(0..self.grid.ratios.len())])
            .collect();
        ArchSpec { depths, widths }
    }

    /// Rejection-samples an architecture whose FLOPs ratio lies in
    /// `[r(1-ε), r(1+ε)]`. A target of exactly 1 returns the full network.
    pub fn sample<R: Rng + ?Sized>(&self, target: f64, band: f64, rng: &mut R) -> Result<ArchSpec, ArchError> {
        self.sample_capped(target, band, DEFAULT_ATTEMPTS, rng)
    }

    pub fn sample_capped<R: Rng + ?Sized>(
        &self,
        target: f64,
        band: f64,
        attempts: usize,
        rng: &mut R,
    ) -> Result<ArchSpec, ArchError> {
        let (lo, hi) = (target * (1.0 - band), target * (1.0 + band));
        if target == 1.0 {
            return Ok(self.full_arch());
        }
        let mut nearest = f64::NAN;
        for _ in 0..attempts {
            let arch = self.draw(rng);
            let ratio = self.flops_ratio(&arch)?;
            if (lo..=hi).contains(&ratio) {
                return Ok(arch);
            }
            if nearest.is_nan() || (ratio - target).abs() < (nearest - target).abs() {
                nearest = ratio;
            }
        }
        Err(ArchError::Infeasible { lo, hi, attempts, nearest })
    }

    /// Per stage, a width drawn uniformly from grid values at least the
    /// current one and a depth drawn uniformly from `[depth, stage size]`.
    pub fn mutate_expand<R: Rng + ?Sized>(&self, arch: &ArchSpec, rng: &mut R) -> ArchSpec {
        let sizes = self.graph.stage_sizes();
        let mut out = arch.clone();
        for (s, &size) in sizes.iter().enumerate() {
            let larger: Vec<f64> = self.grid.ratios.iter().copied().filter(|w| *w >= arch.widths[s]).collect();
            out.widths[s] = if larger.is_empty() { arch.widths[s] } else { larger[rng.random_range(0..larger.len())] };
            out.depths[s] = rng.random_range(arch.depths[s]..=size);
        }
        out
    }

    pub fn contains(&self, big: &ArchSpec, small: &ArchSpec) -> Result<bool, ArchError> {
        Ok(self.mask(big)?.contains(&self.mask(small)?))
    }

    /// Every architecture of the space, in lexicographic (depths, widths) order.
    pub fn enumerate(&self) -> Vec<ArchSpec> {
        let sizes = self.graph.stage_sizes();
        let s = sizes.len();
        let mut out = vec![ArchSpec { depths: Vec::new(), widths: Vec::new() }];
        for &n in &sizes {
            out = out
                .into_iter()
                .flat_map(|a| {
                    (1..=n).map(move |d| {
                        let mut a = a.clone();
                        a.depths.push(d);
                        a
                    })
                })
                .collect();
        }
        let grid = &self.grid.ratios;
        for _ in 0..s {
            out = out
                .into_iter()
                .flat_map(|a| {
                    grid.iter().map(move |w| {
                        let mut a = a.clone();
                        a.widths.push(*w);
                        a
                    })
                })
                .collect();
        }
        out
    }
}

pub fn sample_arch<R: Rng + ?Sized>(space: &ArchSpace<'_>, target: f64, band: f64, rng: &mut R) -> Result<ArchSpec, ArchError> {
    space.sample(target, band, rng)
}

pub fn mutate_expand<R: Rng + ?Sized>(arch: &ArchSpec, space: &ArchSpace<'_>, rng: &mut R) -> ArchSpec {
    space.mutate_expand(arch, rng)
}

pub fn contains(big: &ArchSpec, small: &ArchSpec, graph: &CompGraph) -> Result<bool, ArchError> {
    Ok(big.to_mask(graph)?.contains(&small.to_mask(graph)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_tuple_text() {
        let a: ArchSpec = "((2, 3, 4, 2), (0.3, 0.3, 0.3, 0.7))".parse().unwrap();
        assert_eq!(a.depths, vec![2, 3, 4, 2]);
        assert_eq!(a.widths, vec![0.3, 0.3, 0.3, 0.7]);
        assert_eq!(a.to_string(), "((2, 3, 4, 2), (0.3, 0.3, 0.3, 0.7))");
        let full = ArchSpec { depths: vec![3, 3], widths: vec![1.0, 1.0] };
        assert_eq!(full.to_string(), "((3, 3), (1.0, 1.0))");
        let one = ArchSpec { depths: vec![1], widths: vec![0.5] };
        assert_eq!(one.to_string(), "((1,), (0.5,))");
        assert_eq!(one.to_string().parse::<ArchSpec>().unwrap(), one);
    }

    #[test]
    fn malformed_text_is_rejected() {
        for bad in ["", "((2, 3), (0.3))", "((2, x), (0.3, 0.5))", "(2, 3)", "((2, 3), (0.3, 0.5)", "((), ())"] {
            assert!(bad.parse::<ArchSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(kept_channels(0.5, 4), 2);
        assert_eq!(kept_channels(0.5, 5), 3);
        assert_eq!(kept_channels(0.9, 5), 5);
        assert_eq!(kept_channels(0.3, 2), 1);
        assert_eq!(kept_channels(0.01, 8), 1);
        assert_eq!(kept_channels(0.3, 64), 19);
        assert_eq!(kept_channels(1.0, 7), 7);
    }

    #[test]
    fn grid_validation() {
        assert!(WidthGrid::new(vec![0.5, 0.3, 1.0]).is_err());
        assert!(WidthGrid::new(vec![0.0, 1.0]).is_err());
        assert!(WidthGrid::new(vec![0.5, 0.9]).is_err());
        assert!(WidthGrid::new(vec![0.25, 0.5, 1.0]).is_ok());
    }
}
