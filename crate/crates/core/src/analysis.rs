//! Magnitude profiles, pool clustering, look tables and the single-layer
//! distillation oracle.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::arch::{ArchError, ArchSpace, ArchSpec};
use crate::data::{DataError, Dataset};
use crate::graph::{CompGraph, NodeId, Params};
use crate::pool::Pool;
use crate::trainer::{accuracy, drop_masks, extract_pruned, run_suppressed_on, DropMasks, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("layer {layer}: {msg}")]
    Shape { layer: NodeId, msg: String },
    #[error("toy model: {0}")]
    Toy(String),
    #[error("empty pool")]
    EmptyPool,
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Mean absolute weights of one prunable layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMagnitude {
    pub layer: NodeId,
    pub stage: usize,
    /// `None` when the partition is empty.
    pub chosen_mean: Option<f64>,
    pub unchosen_mean: Option<f64>,
    /// Over all weights of the baseline layer.
    pub baseline_mean: f64,
    /// Over the baseline weights at the unchosen positions.
    pub baseline_unchosen_mean: Option<f64>,
    pub chosen_count: usize,
    pub unchosen_count: usize,
}

impl LayerMagnitude {
    /// `chosen_mean / unchosen_mean` when both partitions are non-empty.
    pub fn ratio(&self) -> Option<f64> {
        Some(self.chosen_mean? / self.unchosen_mean?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MagnitudeProfile {
    pub layers: Vec<LayerMagnitude>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per prunable layer, mean `|w|` over the chosen weights (not flagged in
/// `drops`), the unchosen ones, and the matched `baseline` weights.
pub fn magnitude_profile(
    graph: &CompGraph,
    params: &Params,
    drops: &DropMasks,
    baseline: &Params,
) -> Result<MagnitudeProfile, AnalysisError> {
    let mut layers = Vec::new();
    for node in graph.prunable_layers() {
        let shape_err = |msg: &str| AnalysisError::Shape { layer: node.id, msg: msg.to_string() };
        let w = &params.layers.get(&node.id).ok_or_else(|| shape_err("no parameters"))?.weight;
        let base = &baseline.layers.get(&node.id).ok_or_else(|| shape_err("no baseline parameters"))?.weight;
        let (dropped, _) = drops.get(&node.id).ok_or_else(|| shape_err("no mask"))?;
        if w.shape() != base.shape() {
            return Err(shape_err(&format!("baseline shape {:?} differs from {:?}", base.shape(), w.shape())));
        }
        if dropped.len() != w.numel() {
            return Err(shape_err(&format!("mask covers {} weights, layer has {}", dropped.len(), w.numel())));
        }
        let pick = |data: &[f64], want: bool| -> Vec<f64> {
            data.iter().zip(dropped).filter(|(_, d)| **d == want).map(|(v, _)| v.abs()).collect()
        };
        let chosen = pick(w.data(), false);
        let unchosen = pick(w.data(), true);
        layers.push(LayerMagnitude {
            layer: node.id,
            stage: node.unit.map_or(0, |u| u.stage),
            chosen_mean: mean(chosen.iter().copied()),
            unchosen_mean: mean(unchosen.iter().copied()),
            baseline_mean: mean(base.data().iter().map(|v| v.abs())).unwrap_or(0.0),
            baseline_unchosen_mean: mean(pick(base.data(), true).into_iter()),
            chosen_count: chosen.len(),
            unchosen_count: unchosen.len(),
        });
    }
    Ok(MagnitudeProfile { layers })
}

/// [`magnitude_profile`] with the chosen set given by the weights `arch`
/// keeps.
pub fn magnitude_profile_for_arch(
    graph: &CompGraph,
    params: &Params,
    arch: &ArchSpec,
    baseline: &Params,
) -> Result<MagnitudeProfile, AnalysisError> {
    let kept = extract_pruned(graph, params, arch)?.kept;
    magnitude_profile(graph, params, &drop_masks(graph, &kept), baseline)
}

impl MagnitudeProfile {
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "stage", "chosen_mean", "unchosen_mean", "baseline_mean", "baseline_unchosen_mean"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for l in &self.layers {
            w.write_record([
                l.layer.to_string(),
                l.stage.to_string(),
                opt(l.chosen_mean),
                opt(l.unchosen_mean),
                l.baseline_mean.to_string(),
                opt(l.baseline_unchosen_mean),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-stage depth fractions followed by per-stage width ratios.
pub fn arch_vector(arch: &ArchSpec, graph: &CompGraph) -> Result<Vec<f64>, ArchError> {
    let sizes = graph.stage_sizes();
    if arch.depths.len() != sizes.len() || arch.widths.len() != sizes.len() {
        return Err(ArchError::StageMismatch { expected: sizes.len(), got: arch.depths.len() });
    }
    let depths = arch.depths.iter().zip(&sizes).map(|(d, s)| *d as f64 / *s as f64);
    Ok(depths.chain(arch.widths.iter().copied()).collect())
}

/// Mean squared distance of the archs' vectors to their centroid.
pub fn arch_sse(archs: &[&ArchSpec], graph: &CompGraph) -> Result<f64, AnalysisError> {
    if archs.is_empty() {
        return Err(AnalysisError::EmptyPool);
    }
    let vs = archs.iter().map(|a| arch_vector(a, graph)).collect::<Result<Vec<_>, _>>()?;
    let n = vs.len() as f64;
    let mut centroid = vec![0.0; vs[0].len()];
    for v in &vs {
        for (c, x) in centroid.iter_mut().zip(v) {
            *c += x / n;
        }
    }
    let total: f64 = vs.iter().map(|v| v.iter().zip(&centroid).map(|(x, c)| (x - c).powi(2)).sum::<f64>()).sum();
    Ok(total / n)
}

pub fn pool_sse(pool: &Pool, graph: &CompGraph) -> Result<f64, AnalysisError> {
    let archs: Vec<&ArchSpec> = pool.entries.iter().map(|e| &e.arch).collect();
    arch_sse(&archs, graph)
}

/// Test accuracy of each architecture trained from scratch as a
/// standalone compact network.
#[derive(Clone, Debug, Default)]
pub struct LookTable {
    pub entries: Vec<(ArchSpec, f64)>,
    index: HashMap<ArchSpec, usize>,
}

impl LookTable {
    pub fn from_entries(entries: Vec<(ArchSpec, f64)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (a, _))| (a.clone(), i)).collect();
        Self { entries, index }
    }

    pub fn get(&self, arch: &ArchSpec) -> Option<f64> {
        self.index.get(arch).map(|i| self.entries[*i].1)
    }

    /// 1-based rank of `arch` by accuracy (ties share the best rank).
    pub fn rank(&self, arch: &ArchSpec) -> Option<usize> {
        let acc = self.get(arch)?;
        Some(1 + self.entries.iter().filter(|(_, a)| *a > acc).count())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mean accuracy over `archs`; `None` if any is missing.
    pub fn mean_of<'a>(&self, archs: impl IntoIterator<Item = &'a ArchSpec>) -> Option<f64> {
        let accs = archs.into_iter().map(|a| self.get(a)).collect::<Option<Vec<f64>>>()?;
        mean(accs.into_iter())
    }
}

/// Trains every arch in `archs` from scratch with cross-entropy under `cfg`
/// and records its test accuracy.
pub fn build_look_table(
    cfg: &TrainConfig,
    graph: &CompGraph,
    train: &Dataset,
    test: &Dataset,
    archs: &[ArchSpec],
) -> Result<LookTable, AnalysisError> {
    let mut entries = Vec::with_capacity(archs.len());
    let seed_params = Params::init(graph, &mut crate::trainer::stream_rng(cfg.seed, crate::trainer::STREAM_INIT));
    for arch in archs {
        let compact = extract_pruned(graph, &seed_params, arch)?;
        let full = ArchSpec::full(&compact.graph);
        let run = run_suppressed_on(cfg, &compact.graph, train, &full, 0.0)?;
        entries.push((arch.clone(), accuracy(&compact.graph, &run.main, test, None)?));
    }
    Ok(LookTable::from_entries(entries))
}

/// One row of the pool trajectory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub round: usize,
    pub t: u64,
    pub pool_size: usize,
    pub pool_sse: f64,
    /// Empty when the look table misses an entry.
    pub mean_lookup_acc: Option<f64>,
}

pub fn pool_trajectory(
    snapshots: &[crate::trainer::PoolSnapshot],
    graph: &CompGraph,
    table: Option<&LookTable>,
) -> Result<Vec<TrajectoryRow>, AnalysisError> {
    snapshots
        .iter()
        .enumerate()
        .map(|(round, s)| {
            Ok(TrajectoryRow {
                round,
                t: s.t,
                pool_size: s.pool.len(),
                pool_sse: pool_sse(&s.pool, graph)?,
                mean_lookup_acc: table.and_then(|tb| tb.mean_of(s.pool.entries.iter().map(|e| &e.arch))),
            })
        })
        .collect()
}

/// Every architecture of `space` whose FLOPs ratio lies in the band around
/// `target`.
pub fn in_band_archs(space: &ArchSpace<'_>, target: f64, band: f64) -> Result<Vec<ArchSpec>, ArchError> {
    let (lo, hi) = (target * (1.0 - band), target * (1.0 + band));
    let mut out = Vec::new();
    for a in space.enumerate() {
        let r = space.flops_ratio(&a)?;
        if r >= lo && r <= hi {
            out.push(a);
        }
    }
    Ok(out)
}

/// Single logistic unit split into kept (`s`) and dropped (`d`) inputs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyModel {
    pub theta_s: Vec<f64>,
    pub theta_d: Vec<f64>,
    pub x_s: Vec<f64>,
    pub x_d: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ToyModel {
    pub fn new(theta_s: Vec<f64>, theta_d: Vec<f64>, x_s: Vec<f64>, x_d: Vec<f64>) -> Result<Self, AnalysisError> {
        if theta_s.len() != x_s.len() || theta_d.len() != x_d.len() {
            return Err(AnalysisError::Toy(format!(
                "dimension mismatch: θ_s {} x_s {}, θ_d {} x_d {}",
                theta_s.len(),
                x_s.len(),
                theta_d.len(),
                x_d.len()
            )));
        }
        if theta_s.iter().chain(&theta_d).chain(&x_s).chain(&x_d).any(|v| !v.is_finite()) {
            return Err(AnalysisError::Toy("non-finite entry".into()));
        }
        Ok(Self { theta_s, theta_d, x_s, x_d })
    }

    /// Entries uniform in `[-2, 2]`, 1 to `max_dim` coordinates per part.
    pub fn random<R: Rng + ?Sized>(max_dim: usize, rng: &mut R) -> Self {
        let ds = rng.random_range(1..=max_dim);
        let dd = rng.random_range(1..=max_dim);
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect::<Vec<f64>>();
        Self { theta_s: v(ds), theta_d: v(dd), x_s: v(ds), x_d: v(dd) }
    }

    /// `θ_s·x_s`
    pub fn kept_logit(&self) -> f64 {
        dot(&self.theta_s, &self.x_s)
    }

    /// `θ_d·x_d`
    pub fn dropped_logit(&self) -> f64 {
        dot(&self.theta_d, &self.x_d)
    }

    pub fn with_theta_d_scaled(&self, c: f64) -> Self {
        Self { theta_d: self.theta_d.iter().map(|v| v * c).collect(), ..self.clone() }
    }
}

/// Squared gap between the full unit and the unit without its dropped
/// inputs.
pub fn toy_kd_loss(m: &ToyModel) -> f64 {
    let (a, b) = (m.kept_logit(), m.dropped_logit());
    (sigmoid(a + b) - sigmoid(a)).powi(2)
}

/// Gradient of [`toy_kd_loss`] in `θ_s`, the full unit held constant.
pub fn toy_kd_grad(m: &ToyModel) -> Vec<f64> {
    let (a, b) = (m.kept_logit(), m.dropped_logit());
    let s = sigmoid(a);
    let c = -2.0 * (sigmoid(a + b) - s) * s * (1.0 - s);
    m.x_s.iter().map(|x| c * x).collect()
}

/// Distance between the output gap and its first-order expansion in
/// `θ_d·x_d`.
pub fn taylor_gap(m: &ToyModel) -> f64 {
    let (a, b) = (m.kept_logit(), m.dropped_logit());
    let s = sigmoid(a);
    ((sigmoid(a + b) - s) - s * (1.0 - s) * b).abs()
}

/// [`toy_kd_loss`] with the full unit frozen at `teacher`.
fn toy_kd_loss_frozen(m: &ToyModel, teacher: f64) -> f64 {
    (teacher - sigmoid(m.kept_logit())).powi(2)
}

/// Central differences of the loss in `θ_s` with the full unit held at its
/// current value.
pub fn toy_kd_grad_numeric(m: &ToyModel, h: f64) -> Vec<f64> {
    let teacher = sigmoid(m.kept_logit() + m.dropped_logit());
    (0..m.theta_s.len())
        .map(|i| {
            let mut plus = m.clone();
            plus.theta_s[i] += h;
            let mut minus = m.clone();
            minus.theta_s[i] -= h;
            // The full unit moves with θ_s too; freeze it as the teacher.
            (toy_kd_loss_frozen(&plus, teacher) - toy_kd_loss_frozen(&minus, teacher)) / (2.0 * h)
        })
        .collect()
}

/// `max|a − n| / max(max|n|, floor)` over the coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(floor, f64::max);
    diff / scale
}

pub const FD_STEP: f64 = 1e-5;
pub const TAYLOR_WINDOW: (f64, f64) = (3.5, 4.5);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares [`toy_kd_grad`] with central differences on random models.
pub fn check_toy_grad<R: Rng + ?Sized>(instances: usize, max_dim: usize, rng: &mut R) -> GradCheckReport {
    let tolerance = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let m = ToyModel::random(max_dim, rng);
        let err = relative_error(&toy_kd_grad(&m), &toy_kd_grad_numeric(&m, FD_STEP), 1e-8);
        worst = worst.max(err);
    }
    GradCheckReport { instances, max_rel_error: worst, tolerance, pass: worst <= tolerance }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaylorReport {
    pub instances: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub window: (f64, f64),
    pub pass: bool,
}

/// Random model with `0.5 ≤ |θ_s·x_s|` and `0.02 ≤ |θ_d·x_d| ≤ 0.1`.
///
/// At `θ_s·x_s = 0` the logistic has no curvature and the gap turns
/// third order, so the expansion point is kept away from it.
pub fn random_taylor_instance<R: Rng + ?Sized>(max_dim: usize, rng: &mut R) -> ToyModel {
    loop {
        let m = ToyModel::random(max_dim, rng);
        let (a, b) = (m.kept_logit(), m.dropped_logit());
        if a.abs() < 0.5 || b.abs() < 1e-3 {
            continue;
        }
        let target = rng.random_range(0.02..=0.1);
        return m.with_theta_d_scaled(target / b.abs());
    }
}

/// `taylor_gap(θ_d) / taylor_gap(θ_d/2)` on random models.
pub fn check_taylor_order<R: Rng + ?Sized>(instances: usize, max_dim: usize, rng: &mut R) -> TaylorReport {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..instances {
        let m = random_taylor_instance(max_dim, rng);
        let ratio = taylor_gap(&m) / taylor_gap(&m.with_theta_d_scaled(0.5));
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    let window = TAYLOR_WINDOW;
    TaylorReport { instances, min_ratio: lo, max_ratio: hi, window, pass: lo >= window.0 && hi <= window.1 }
}
