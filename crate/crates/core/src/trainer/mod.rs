//! The pruning loop, its baselines and compact-network extraction.
//!
//! Randomness is split into independent ChaCha streams derived from the run
//! seed: parameter initialization, batch order, and architecture choices
//! (pool construction, sampling, mutation, shrink draws). Changing the loss
//! coefficients therefore never changes the batches a run sees.

pub mod checkpoint;
mod config;
mod extract;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::arch::{ArchError, ArchSpace, ArchSpec, StructMask};
use crate::autodiff::{cosine_lr, AutodiffError, OptimState, Tape, Var};
use crate::data::{gen_gaussian_clusters, load_csv, Batcher, DataError, Dataset, GaussianSpec, Split};
use crate::graph::{bind_params, build_graph, forward_on_tape, interpret, BoundParams, CompGraph, GraphError, Params};
use crate::pool::{init_pool, Pool, PoolError, ScoredArch};
use crate::tensor::Tensor;

pub use config::{ConfigError, DataSource, RawConfig, TrainConfig};
pub use extract::{drop_masks, extract_pruned, extract_with_mask, DropMasks, Extracted, KeptSlice};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("unknown model `{0}` (not bundled and not a readable model-spec file)")]
    Model(String),
    #[error("step {t}: non-finite {what}")]
    NonFinite { t: u64, what: String },
    #[error("dataset sample shape {data:?} does not match model input {model:?}")]
    InputShape { data: Vec<usize>, model: Vec<usize> },
}

pub const STREAM_INIT: u64 = 1;
pub const STREAM_DATA: u64 = 2;
pub const STREAM_ARCH: u64 = 3;

/// Independent stream `stream` of the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Resolves a bundled model name or reads a model-spec file.
pub fn load_model(name: &str) -> Result<CompGraph, TrainError> {
    if let Some(g) = crate::models::bundled(name) {
        return Ok(g);
    }
    let text = std::fs::read_to_string(name).map_err(|_| TrainError::Model(name.to_string()))?;
    Ok(build_graph(&text)?)
}

pub fn load_data(source: &DataSource) -> Result<(Dataset, Dataset), TrainError> {
    Ok(match source {
        DataSource::Gaussian { classes, samples, shape, spread, modes, seed } => {
            let spec = GaussianSpec { classes: *classes, samples: *samples, shape: shape.clone(), spread: *spread, modes: *modes, seed: *seed };
            gen_gaussian_clusters(&spec)?
        }
        DataSource::Csv { train, test, shape, classes } => (
            load_csv(Path::new(train), shape, *classes, Split::Train)?,
            load_csv(Path::new(test), shape, *classes, Split::Test)?,
        ),
    })
}

fn check_input(graph: &CompGraph, data: &Dataset) -> Result<(), TrainError> {
    if data.sample_shape() != graph.input_shape() {
        return Err(TrainError::InputShape { data: data.sample_shape().to_vec(), model: graph.input_shape().to_vec() });
    }
    Ok(())
}

/// One row of the STP iteration log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: u64,
    pub lr: f64,
    #[serde(rename = "L_CE")]
    pub l_ce: f64,
    #[serde(rename = "L_STS")]
    pub l_sts: f64,
    #[serde(rename = "L_SME")]
    pub l_sme: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub pool_size: usize,
    pub sampled_arch: ArchSpec,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub record: StepRecord,
    pub target: ArchSpec,
    pub supports: Vec<ArchSpec>,
    /// Entries dropped by this step's scheduled shrink.
    pub removed: Option<Vec<ScoredArch>>,
}

fn finite(t: u64, what: &str, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite { t, what: what.to_string() })
    }
}

/// Gradients of `loss` for `vars`, zero-filled where `loss` does not reach.
fn gradients(tape: &Tape, loss: Var, vars: &[Var], params: &Params) -> Result<Vec<Tensor>, TrainError> {
    let mut grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

fn apply(params: &mut Params, grads: &[Tensor], opt: &mut OptimState, lr: f64) -> Result<(), TrainError> {
    let mut tensors = params.tensors_mut();
    opt.step(&mut tensors, grads, lr)?;
    Ok(())
}

/// Losses and parameter gradients of one STP iteration.
#[derive(Clone, Debug)]
pub struct StpGradients {
    /// In [`Params::tensors`] order.
    pub grads: Vec<Tensor>,
    pub l_ce: f64,
    pub l_sts: f64,
    pub l_sme: f64,
    pub l_total: f64,
}

/// Main-network cross-entropy plus normalized KL from the detached main
/// logits to the `target` subnet (`β1`) and to the mean over `supports`
/// (`β2`), differentiated in one backward pass.
pub fn stp_gradients(
    space: &ArchSpace<'_>,
    params: &Params,
    batch: (&Tensor, &[usize]),
    target: &ArchSpec,
    supports: &[ArchSpec],
    beta1: f64,
    beta2: f64,
) -> Result<StpGradients, TrainError> {
    let graph = space.graph();
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, true);
    let x = tape.constant(batch.0.clone());
    let z_main = forward_on_tape(graph, &mut tape, &bound, x, None)?;
    let l_ce = tape.cross_entropy(z_main, batch.1)?;
    let teacher = tape.detach(z_main);

    let z_target = forward_on_tape(graph, &mut tape, &bound, x, Some(&space.mask(target)?))?;
    let l_sts = tape.normalized_kl(teacher, z_target)?;
    let mut sme_terms = Vec::with_capacity(supports.len());
    for support in supports {
        let z = forward_on_tape(graph, &mut tape, &bound, x, Some(&space.mask(support)?))?;
        sme_terms.push(tape.normalized_kl(teacher, z)?);
    }
    let sme_sum = tape.add(&sme_terms)?;
    let l_sme = tape.scale(sme_sum, 1.0 / supports.len().max(1) as f64);
    let sts_term = tape.scale(l_sts, beta1);
    let sme_term = tape.scale(l_sme, beta2);
    let total = tape.add(&[l_ce, sts_term, sme_term])?;
    let grads = gradients(&tape, total, &bound.vars(), params)?;
    Ok(StpGradients {
        grads,
        l_ce: tape.value(l_ce).item(),
        l_sts: tape.value(l_sts).item(),
        l_sme: tape.value(l_sme).item(),
        l_total: tape.value(total).item(),
    })
}

/// One STP iteration: sample a target from the pool, draw its support
/// subnets, take one SGD step on the combined loss, update the target's
/// score, then run the scheduled pool shrink.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    space: &ArchSpace<'_>,
    params: &mut Params,
    opt: &mut OptimState,
    pool: &mut Pool,
    batch: (&Tensor, &[usize]),
    cfg: &TrainConfig,
    rng: &mut R,
    t: u64,
) -> Result<StepOutput, TrainError> {
    let (index, target) = pool.sample(rng);
    let supports: Vec<ArchSpec> = (0..cfg.n_support).map(|_| space.mutate_expand(&target, rng)).collect();
    let g = stp_gradients(space, params, batch, &target, &supports, cfg.beta1, cfg.beta2)?;
    let l_total = finite(t, "L_total", g.l_total)?;
    let l_sts = finite(t, "L_STS", g.l_sts)?;
    let lr = cosine_lr(t as usize, cfg.t_total as usize, cfg.lr);
    apply(params, &g.grads, opt, lr)?;
    pool.update_score(index, l_sts)?;
    let removed = pool.scheduled_shrink(t, rng);

    let record = StepRecord {
        t,
        lr,
        l_ce: g.l_ce,
        l_sts,
        l_sme: g.l_sme,
        l_total,
        pool_size: pool.len(),
        sampled_arch: target.clone(),
    };
    Ok(StepOutput { record, target, supports, removed })
}

/// Pool state captured at `t` (0 for the initial pool).
#[derive(Clone, Debug)]
pub struct PoolSnapshot {
    pub t: u64,
    pub pool: Pool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub final_arch: ArchSpec,
    /// Main-network weights at the end of training.
    pub main: Params,
    pub pruned: Extracted,
    pub log: Vec<StepRecord>,
    /// The initial pool and the pool after every refine interval.
    pub pool_snapshots: Vec<PoolSnapshot>,
}

fn new_optimizer(cfg: &TrainConfig) -> Result<OptimState, TrainError> {
    Ok(OptimState::new(cfg.lr, cfg.momentum, cfg.weight_decay)?)
}

/// Runs STP end to end as configured, loading model and data.
pub fn run_stp(cfg: &TrainConfig) -> Result<RunResult, TrainError> {
    let graph = load_model(&cfg.model)?;
    let (train, _) = load_data(&cfg.data)?;
    run_stp_on(cfg, &graph, &train)
}

pub fn run_stp_on(cfg: &TrainConfig, graph: &CompGraph, train: &Dataset) -> Result<RunResult, TrainError> {
    cfg.validate()?;
    check_input(graph, train)?;
    let space = ArchSpace::new(graph, cfg.grid())?;
    let mut arch_rng = stream_rng(cfg.seed, STREAM_ARCH);
    let archs = init_pool(cfg.n_p, &space, cfg.target, cfg.band, &mut arch_rng)?;
    let mut pool = Pool::new(archs, cfg.alpha, cfg.k, cfg.t_shr)?;
    pool.rule = cfg.score_rule;
    let mut params = Params::init(graph, &mut stream_rng(cfg.seed, STREAM_INIT));
    let mut opt = new_optimizer(cfg)?;
    let mut batcher = Batcher::from_rng(train.len(), cfg.batch_size, stream_rng(cfg.seed, STREAM_DATA));

    let mut log = Vec::with_capacity(cfg.t_total as usize);
    let mut pool_snapshots = vec![PoolSnapshot { t: 0, pool: pool.clone() }];
    for t in 1..=cfg.t_total {
        let (x, y) = batcher.next_batch(train);
        let out = train_step(&space, &mut params, &mut opt, &mut pool, (&x, &y), cfg, &mut arch_rng, t)?;
        log.push(out.record);
        if t % cfg.k == 0 {
            pool_snapshots.push(PoolSnapshot { t, pool: pool.clone() });
        }
    }
    let final_arch = pool.entries[0].arch.clone();
    let pruned = extract_pruned(graph, &params, &final_arch)?;
    Ok(RunResult { final_arch, main: params, pruned, log, pool_snapshots })
}

/// One row of a baseline log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineRecord {
    pub t: u64,
    pub epoch: u64,
    pub lr: f64,
    #[serde(rename = "L_CE")]
    pub l_ce: f64,
    pub penalty: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    /// `‖θ_d‖` after the step.
    pub dropped_norm: f64,
}

#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub arch: ArchSpec,
    pub main: Params,
    pub pruned: Extracted,
    pub log: Vec<BaselineRecord>,
}

/// `‖θ_d‖₂` over the parameters flagged in `drops`.
pub fn dropped_norm(params: &Params, drops: &DropMasks) -> f64 {
    let mut sq = 0.0;
    for (id, lp) in &params.layers {
        let (w, b) = &drops[id];
        sq += lp.weight.data().iter().zip(w).filter(|(_, d)| **d).map(|(v, _)| v * v).sum::<f64>();
        if let (Some(bias), Some(bm)) = (&lp.bias, b) {
            sq += bias.data().iter().zip(bm).filter(|(_, d)| **d).map(|(v, _)| v * v).sum::<f64>();
        }
    }
    sq.sqrt()
}

/// `(λ/2)·‖θ_d‖²` over the parameters flagged in `drops`; `None` when
/// `λ = 0`.
pub fn suppression_penalty(tape: &mut Tape, bound: &BoundParams, drops: &DropMasks, lambda: f64) -> Result<Option<Var>, TrainError> {
    if lambda == 0.0 {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for (id, (w, b)) in &bound.layers {
        let (wm, bm) = drops.get(id).ok_or(GraphError::Mask(format!("no drop mask for layer {id}")))?;
        terms.push(tape.masked_sq_sum(*w, wm)?);
        if let (Some(b), Some(bm)) = (b, bm) {
            terms.push(tape.masked_sq_sum(*b, bm)?);
        }
    }
    let sq = tape.add(&terms)?;
    Ok(Some(tape.scale(sq, lambda / 2.0)))
}

/// Cross-entropy training plus `(λ/2)·‖θ_d‖²` on the parameters outside
/// `arch`; `λ = 0` is standard training.
pub fn run_suppressed_on(
    cfg: &TrainConfig,
    graph: &CompGraph,
    train: &Dataset,
    arch: &ArchSpec,
    lambda: f64,
) -> Result<BaselineResult, TrainError> {
    cfg.validate()?;
    check_input(graph, train)?;
    let space = ArchSpace::new(graph, cfg.grid())?;
    space.validate(arch)?;
    let mut params = Params::init(graph, &mut stream_rng(cfg.seed, STREAM_INIT));
    let drops = drop_masks(graph, &extract_pruned(graph, &params, arch)?.kept);
    let mut opt = new_optimizer(cfg)?;
    let mut batcher = Batcher::from_rng(train.len(), cfg.batch_size, stream_rng(cfg.seed, STREAM_DATA));
    let mut log = Vec::with_capacity(cfg.t_total as usize);
    for t in 1..=cfg.t_total {
        let (x, y) = batcher.next_batch(train);
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params, true);
        let xv = tape.constant(x);
        let z = forward_on_tape(graph, &mut tape, &bound, xv, None)?;
        let l_ce = tape.cross_entropy(z, &y)?;
        let total = match suppression_penalty(&mut tape, &bound, &drops, lambda)? {
            Some(p) => tape.add(&[l_ce, p])?,
            None => l_ce,
        };
        let l_total = finite(t, "L_total", tape.value(total).item())?;
        let l_ce_v = tape.value(l_ce).item();
        let lr = cosine_lr(t as usize, cfg.t_total as usize, cfg.lr);
        let grads = gradients(&tape, total, &bound.vars(), &params)?;
        apply(&mut params, &grads, &mut opt, lr)?;
        log.push(BaselineRecord {
            t,
            epoch: batcher.epoch,
            lr,
            l_ce: l_ce_v,
            penalty: l_total - l_ce_v,
            l_total,
            dropped_norm: dropped_norm(&params, &drops),
        });
    }
    let pruned = extract_pruned(graph, &params, arch)?;
    Ok(BaselineResult { arch: arch.clone(), main: params, pruned, log })
}

/// The baseline architecture: `arch` from the config, else a draw from the
/// architecture stream at the configured target.
pub fn baseline_arch(cfg: &TrainConfig, graph: &CompGraph) -> Result<ArchSpec, TrainError> {
    match &cfg.arch {
        Some(a) => Ok(a.clone()),
        None => {
            let space = ArchSpace::new(graph, cfg.grid())?;
            Ok(space.sample(cfg.target, cfg.band, &mut stream_rng(cfg.seed, STREAM_ARCH))?)
        }
    }
}

pub fn run_suppressed_baseline(cfg: &TrainConfig) -> Result<BaselineResult, TrainError> {
    let graph = load_model(&cfg.model)?;
    let (train, _) = load_data(&cfg.data)?;
    let arch = baseline_arch(cfg, &graph)?;
    run_suppressed_on(cfg, &graph, &train, &arch, cfg.lambda)
}

pub fn run_standard_baseline(cfg: &TrainConfig) -> Result<BaselineResult, TrainError> {
    let graph = load_model(&cfg.model)?;
    let (train, _) = load_data(&cfg.data)?;
    let arch = baseline_arch(cfg, &graph)?;
    run_suppressed_on(cfg, &graph, &train, &arch, 0.0)
}

/// Top-1 accuracy of `graph` (under `mask`) on `data`.
pub fn accuracy(graph: &CompGraph, params: &Params, data: &Dataset, mask: Option<&StructMask>) -> Result<f64, TrainError> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.gather(chunk);
        let out = interpret(graph, params, &x, mask, false)?.output;
        correct += out.argmax_rows().iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Writes rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent() {
        let a: u64 = stream_rng(7, STREAM_INIT).random();
        let b: u64 = stream_rng(7, STREAM_DATA).random();
        assert_ne!(a, b);
        assert_eq!(a, stream_rng(7, STREAM_INIT).random::<u64>());
    }
}
