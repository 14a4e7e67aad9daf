//! The verbs of the `stp` binary.
//!
//! Every verb takes a [`RawConfig`] (file plus overrides) and an output
//! directory, writes its artifacts and returns the text for stdout.
//! Failures carry an exit code: 1 for a failed verification, 2 for usage,
//! configuration or input errors.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::analysis::{
    build_look_table, check_taylor_order, check_toy_grad, in_band_archs, magnitude_profile_for_arch, pool_sse,
    pool_trajectory, AnalysisError, GradCheckReport, TaylorReport,
};
use crate::arch::{ArchError, ArchSpace, ArchSpec, WidthGrid};
use crate::data::DataError;
use crate::graph::{estimate_cost, CompGraph, GraphError, Params};
use crate::pool::{Pool, PoolError};
use crate::trainer::checkpoint::{self, CheckpointError};
use crate::trainer::{
    accuracy, baseline_arch, load_data, load_model, run_stp_on, run_suppressed_on, write_csv, ConfigError, Extracted,
    RawConfig, TrainConfig, TrainError,
};

pub const VERBS: [&str; 7] =
    ["prune", "baseline-suppressed", "baseline-standard", "estimate", "analyze", "verify-appendix-e", "pool-inspect"];

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("verification failed")]
    Verification(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Verification(_) => 1,
            CommandError::Train(TrainError::NonFinite { .. }) => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CommandError::Usage(_) => "usage",
            CommandError::Config(_) => "config",
            CommandError::Train(_) => "train",
            CommandError::Arch(_) => "arch",
            CommandError::Graph(_) => "graph",
            CommandError::Pool(_) => "pool",
            CommandError::Analysis(_) => "analysis",
            CommandError::Data(_) => "data",
            CommandError::Checkpoint(_) => "checkpoint",
            CommandError::Io { .. } => "io",
            CommandError::Json(_) => "json",
            CommandError::Verification(_) => "verification",
        }
    }

    /// Machine-readable form; `key` names the offending config key if any.
    pub fn to_json(&self) -> serde_json::Value {
        let key = match self {
            CommandError::Config(ConfigError::Missing(k) | ConfigError::Unknown(k))
            | CommandError::Config(ConfigError::Invalid { key: k, .. })
            | CommandError::Train(TrainError::Config(ConfigError::Missing(k) | ConfigError::Unknown(k))) => Some(k.clone()),
            _ => None,
        };
        let mut v = json!({ "error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() });
        if let Some(k) = key {
            v["key"] = json!(k);
        }
        if let CommandError::Verification(report) = self {
            v["report"] = serde_json::from_str(report).unwrap_or(json!(report));
        }
        v
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, text: &str) -> Result<(), CommandError> {
    fs::write(path, text).map_err(io_err(path))
}

fn mkdir(path: &Path) -> Result<(), CommandError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CommandError> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Reads `config` (if given), then applies `sets` and `seed` in order.
pub fn load_raw(config: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RawConfig, CommandError> {
    let mut raw = match config {
        Some(p) => RawConfig::parse(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => RawConfig::default(),
    };
    for s in sets {
        raw.set(s)?;
    }
    if let Some(seed) = seed {
        raw.insert("seed", seed);
    }
    Ok(raw)
}

/// Runs `verb`; returns what goes to stdout.
pub fn run(verb: &str, raw: &RawConfig, out: &Path) -> Result<String, CommandError> {
    match verb {
        "prune" => cmd_prune(&TrainConfig::from_raw(raw)?, out),
        "baseline-suppressed" => cmd_baseline(&TrainConfig::from_raw(raw)?, out, true),
        "baseline-standard" => cmd_baseline(&TrainConfig::from_raw(raw)?, out, false),
        "analyze" => cmd_analyze(raw, out),
        "estimate" => cmd_estimate(raw),
        "verify-appendix-e" => cmd_verify_appendix_e(raw),
        "pool-inspect" => cmd_pool_inspect(raw),
        other => Err(CommandError::Usage(format!("unknown verb `{other}`; expected one of {}", VERBS.join(", ")))),
    }
}

/// Rejects keys outside `allowed`.
fn only_keys(raw: &RawConfig, allowed: &[&str]) -> Result<(), CommandError> {
    match raw.values.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ConfigError::Unknown(k.clone()).into()),
        None => Ok(()),
    }
}

fn parse_key<T: std::str::FromStr>(raw: &RawConfig, key: &str, default: T) -> Result<T, CommandError>
where
    T::Err: std::fmt::Display,
{
    match raw.values.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|e: T::Err| {
            ConfigError::Invalid { key: key.into(), value: v.clone(), msg: e.to_string() }.into()
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub arch: String,
    pub flops_ratio: f64,
    pub params_ratio: f64,
    pub pruned_params: usize,
    pub main_test_accuracy: f64,
    pub pruned_test_accuracy: f64,
    pub final_train_loss: f64,
}

fn summarize(
    graph: &CompGraph,
    grid: WidthGrid,
    arch: &ArchSpec,
    main: &Params,
    pruned: &Extracted,
    test: &crate::data::Dataset,
    final_train_loss: f64,
) -> Result<Summary, CommandError> {
    let space = ArchSpace::new(graph, grid)?;
    Ok(Summary {
        arch: arch.to_string(),
        flops_ratio: space.flops_ratio(arch)?,
        params_ratio: space.params_ratio(arch)?,
        pruned_params: pruned.params.count(),
        main_test_accuracy: accuracy(graph, main, test, None)?,
        pruned_test_accuracy: accuracy(&pruned.graph, &pruned.params, test, None)?,
        final_train_loss,
    })
}

/// Full STP run: `iterations.csv`, `pool/pool_t*.json`, `final_arch.txt`,
/// `pruned/` weights, `main/` weights and `summary.json`.
pub fn cmd_prune(cfg: &TrainConfig, out: &Path) -> Result<String, CommandError> {
    let graph = load_model(&cfg.model)?;
    let (train, test) = load_data(&cfg.data)?;
    let run = run_stp_on(cfg, &graph, &train)?;
    mkdir(out)?;
    write_csv(&out.join("iterations.csv"), &run.log)?;
    let pool_dir = out.join("pool");
    mkdir(&pool_dir)?;
    for snap in &run.pool_snapshots {
        snap.pool.save(&pool_dir.join(format!("pool_t{:06}.json", snap.t)))?;
    }
    write(&out.join("final_arch.txt"), &format!("{}\n", run.final_arch))?;
    for (dir, g, p) in [("pruned", &run.pruned.graph, &run.pruned.params), ("main", &graph, &run.main)] {
        mkdir(&out.join(dir))?;
        checkpoint::save(&out.join(dir), g, p)?;
    }
    let last = run.log.last().map_or(f64::NAN, |r| r.l_total);
    let summary = summarize(&graph, cfg.grid(), &run.final_arch, &run.main, &run.pruned, &test, last)?;
    let text = to_json(&summary)?;
    write(&out.join("summary.json"), &text)?;
    Ok(text)
}

/// Suppressed (`λ` from the config) or standard (`λ = 0`) training on a
/// fixed architecture.
pub fn cmd_baseline(cfg: &TrainConfig, out: &Path, suppressed: bool) -> Result<String, CommandError> {
    let graph = load_model(&cfg.model)?;
    let (train, test) = load_data(&cfg.data)?;
    let arch = baseline_arch(cfg, &graph)?;
    let lambda = if suppressed { cfg.lambda } else { 0.0 };
    let run = run_suppressed_on(cfg, &graph, &train, &arch, lambda)?;
    mkdir(out)?;
    write_csv(&out.join("iterations.csv"), &run.log)?;
    write(&out.join("final_arch.txt"), &format!("{arch}\n"))?;
    for (dir, g, p) in [("pruned", &run.pruned.graph, &run.pruned.params), ("main", &graph, &run.main)] {
        mkdir(&out.join(dir))?;
        checkpoint::save(&out.join(dir), g, p)?;
    }
    let last = run.log.last().map_or(f64::NAN, |r| r.l_total);
    let summary = summarize(&graph, cfg.grid(), &arch, &run.main, &run.pruned, &test, last)?;
    let text = to_json(&summary)?;
    write(&out.join("summary.json"), &text)?;
    Ok(text)
}

/// Keys `analyze` accepts on top of the training keys.
const ANALYZE_KEYS: [&str; 1] = ["look_table"];

/// STP and a seed-matched standard run on the STP result: magnitude profile,
/// pool trajectory and, with `look_table = true`, a look table over the
/// in-band architectures.
pub fn cmd_analyze(raw: &RawConfig, out: &Path) -> Result<String, CommandError> {
    let mut train_raw = raw.clone();
    let look: bool = parse_key(raw, "look_table", false)?;
    for k in ANALYZE_KEYS {
        train_raw.values.remove(k);
    }
    let cfg = TrainConfig::from_raw(&train_raw)?;
    let graph = load_model(&cfg.model)?;
    let (train, test) = load_data(&cfg.data)?;
    let stp = run_stp_on(&cfg, &graph, &train)?;
    let standard = run_suppressed_on(&cfg, &graph, &train, &stp.final_arch, 0.0)?;
    let profile = magnitude_profile_for_arch(&graph, &stp.main, &stp.final_arch, &standard.main)?;
    let table = if look {
        let space = ArchSpace::new(&graph, cfg.grid())?;
        let archs = in_band_archs(&space, cfg.target, cfg.band)?;
        Some(build_look_table(&cfg, &graph, &train, &test, &archs)?)
    } else {
        None
    };
    let trajectory = pool_trajectory(&stp.pool_snapshots, &graph, table.as_ref())?;
    mkdir(out)?;
    profile.write_csv(&out.join("magnitude_profile.csv"))?;
    write_csv(&out.join("pool_trajectory.csv"), &trajectory)?;
    if let Some(t) = &table {
        let rows: Vec<_> = t.entries.iter().map(|(a, acc)| json!({ "arch": a.to_string(), "accuracy": acc })).collect();
        write(&out.join("look_table.json"), &to_json(&rows)?)?;
    }
    let ratios: Vec<_> = profile
        .layers
        .iter()
        .map(|l| json!({ "layer": l.layer, "stage": l.stage, "ratio": l.ratio() }))
        .collect();
    let report = json!({
        "final_arch": stp.final_arch.to_string(),
        "survivor_rank": table.as_ref().and_then(|t| t.rank(&stp.final_arch)),
        "look_table_size": table.as_ref().map(|t| t.len()),
        "pool_sse_initial": trajectory.first().map(|r| r.pool_sse),
        "pool_sse_final": trajectory.last().map(|r| r.pool_sse),
        "layers": ratios,
    });
    let text = to_json(&report)?;
    write(&out.join("analysis.json"), &text)?;
    Ok(text)
}

/// Prints `{flops, params, flops_ratio, params_ratio}` for `arch` (full when
/// absent) on `model`, with an optional `shape` override of the sample shape
/// and `batch` (default 1).
pub fn cmd_estimate(raw: &RawConfig) -> Result<String, CommandError> {
    only_keys(raw, &["model", "arch", "shape", "batch", "seed"])?;
    let model = raw.values.get("model").ok_or_else(|| ConfigError::Missing("model".into()))?;
    let graph = load_model(model)?;
    let arch = match raw.values.get("arch").map(|s| s.as_str()) {
        None | Some("") => ArchSpec::full(&graph),
        Some(text) => text.parse()?,
    };
    let batch: usize = parse_key(raw, "batch", 1)?;
    let mut shape = vec![batch];
    match raw.values.get("shape") {
        Some(s) => {
            let dims = s.split('x').map(|d| d.trim().parse::<usize>()).collect::<Result<Vec<_>, _>>().map_err(|e| {
                ConfigError::Invalid { key: "shape".into(), value: s.clone(), msg: e.to_string() }
            })?;
            shape.extend(dims);
        }
        None => shape.extend_from_slice(graph.input_shape()),
    }
    let mask = arch.to_mask(&graph)?;
    let full = estimate_cost(&graph, &shape, None)?;
    let cost = estimate_cost(&graph, &shape, Some(&mask))?;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let v = json!({
        "arch": arch.to_string(),
        "flops": cost.flops,
        "params": cost.params,
        "flops_ratio": ratio(cost.flops, full.flops),
        "params_ratio": ratio(cost.params, full.params),
    });
    to_json(&v)
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyCheckReport {
    pub seed: u64,
    pub trials: usize,
    pub gradient: GradCheckReport,
    pub taylor: TaylorReport,
    pub pass: bool,
}

/// Finite-difference and Taylor-order checks of the single-layer
/// distillation model. Keys: `trials` (100), `seed` (0), `max_dim` (8),
/// `tolerance` (1e-6).
pub fn toy_check_report(raw: &RawConfig) -> Result<ToyCheckReport, CommandError> {
    only_keys(raw, &["trials", "seed", "max_dim", "tolerance"])?;
    let trials: usize = parse_key(raw, "trials", 100)?;
    let seed: u64 = parse_key(raw, "seed", 0)?;
    let max_dim: usize = parse_key(raw, "max_dim", 8)?;
    let tolerance: f64 = parse_key(raw, "tolerance", 1e-6)?;
    if trials == 0 || max_dim == 0 {
        return Err(CommandError::Usage("trials and max_dim must be at least 1".into()));
    }
    let mut gradient = check_toy_grad(trials, max_dim, &mut ChaCha8Rng::seed_from_u64(seed));
    gradient.tolerance = tolerance;
    gradient.pass = gradient.max_rel_error <= tolerance;
    let taylor = check_taylor_order(trials, max_dim, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let pass = gradient.pass && taylor.pass;
    Ok(ToyCheckReport { seed, trials, gradient, taylor, pass })
}

pub fn cmd_verify_appendix_e(raw: &RawConfig) -> Result<String, CommandError> {
    let report = toy_check_report(raw)?;
    let text = to_json(&report)?;
    if report.pass {
        Ok(text)
    } else {
        Err(CommandError::Verification(text))
    }
}

/// Summarizes a pool checkpoint. Keys: `pool` (path), `model`.
pub fn cmd_pool_inspect(raw: &RawConfig) -> Result<String, CommandError> {
    only_keys(raw, &["pool", "model", "seed"])?;
    let path = raw.values.get("pool").ok_or_else(|| ConfigError::Missing("pool".into()))?;
    let model = raw.values.get("model").ok_or_else(|| ConfigError::Missing("model".into()))?;
    let pool = Pool::load(Path::new(path))?;
    let graph = load_model(model)?;
    let space = ArchSpace::new(&graph, WidthGrid::default())?;
    let mut entries = Vec::with_capacity(pool.len());
    for e in &pool.entries {
        entries.push(json!({
            "arch": e.arch.to_string(),
            "score": e.score,
            "updates": e.updates,
            "flops_ratio": space.flops_ratio(&e.arch)?,
        }));
    }
    let v = json!({
        "size": pool.len(),
        "rounds_done": pool.rounds_done,
        "total_rounds": pool.total_rounds(),
        "n_shr": pool.n_shr,
        "pool_sse": pool_sse(&pool, &graph)?,
        "entries": entries,
    });
    to_json(&v)
}
