//! Structured pruning guided by stimulative training.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors, a reverse-mode tape,
//!   cross-entropy and normalized-KL losses, SGD with momentum.
//! - [`graph`]: the computation-graph IR, dependency groups, the masked
//!   interpreter and shape-only cost estimation.
//! - [`arch`]: nested-tuple architectures, masks, FLOPs-constrained sampling
//!   and mutating expansion.
//! - [`pool`]: the EMA-scored architecture pool and its shrink schedule.
//! - [`trainer`]: the pruning loop, baselines and compact-network extraction.
//! - [`analysis`]: magnitude profiles, pool clustering and the single-layer
//!   distillation gradient checks.
//! - [`data`]: synthetic datasets and CSV ingestion.
//! - [`commands`]: the command implementations behind the `stp` binary.

pub mod analysis;
pub mod arch;
pub mod autodiff;
pub mod commands;
pub mod data;
pub mod graph;
pub mod models;
pub mod pool;
pub mod tensor;
pub mod trainer;
