//! Scored architecture pool with a scheduled shrink to one survivor.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, ArchSpace, ArchSpec, DEFAULT_ATTEMPTS};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("only {found} of {wanted} distinct in-band architectures after {attempts} draws")]
    Infeasible { wanted: usize, found: usize, attempts: usize },
    #[error("non-finite loss {0} for a score update")]
    NonFinite(f64),
    #[error("pool index {index} out of range for {len} entries")]
    Index { index: usize, len: usize },
    #[error("invalid pool schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("pool checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("pool checkpoint: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredArch {
    pub arch: ArchSpec,
    /// `None` until the first update.
    pub score: Option<f64>,
    pub updates: u64,
}

/// How a score absorbs a new loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    /// `score ← (1 − α)·score + α·loss`.
    #[default]
    Ema,
    /// `score ← (1 − α·score) + α·loss`, kept for comparison runs.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub entries: Vec<ScoredArch>,
    pub alpha: f64,
    pub rule: ScoreRule,
    /// Refine interval in iterations.
    pub k: u64,
    /// Last step at which shrinking happens.
    pub t_shr: u64,
    pub n_p: usize,
    /// Entries removed per regular round.
    pub n_shr: usize,
    pub rounds_done: u64,
}

/// `floor(k·(N_p − 1) / T_shr)`.
pub fn shrink_count(k: u64, n_p: u64, t_shr: u64) -> u64 {
    assert!(k > 0 && n_p > 0 && t_shr > 0, "shrink_count needs positive arguments");
    k * (n_p - 1) / t_shr
}

/// Draws `n_p` distinct architectures whose FLOPs ratio lies in the band,
/// all unscored.
pub fn init_pool<R: Rng + ?Sized>(
    n_p: usize,
    space: &ArchSpace<'_>,
    target: f64,
    band: f64,
    rng: &mut R,
) -> Result<Vec<ArchSpec>, PoolError> {
    init_pool_capped(n_p, space, target, band, DEFAULT_ATTEMPTS, rng)
}

pub fn init_pool_capped<R: Rng + ?Sized>(
    n_p: usize,
    space: &ArchSpace<'_>,
    target: f64,
    band: f64,
    attempts: usize,
    rng: &mut R,
) -> Result<Vec<ArchSpec>, PoolError> {
    if n_p == 0 {
        return Err(PoolError::Schedule("pool size must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n_p);
    if target == 1.0 {
        out.push(space.full_arch());
    } else {
        let (lo, hi) = (target * (1.0 - band), target * (1.0 + band));
        for _ in 0..attempts {
            if out.len() == n_p {
                break;
            }
            let a = space.draw(rng);
            if seen.contains(&a) {
                continue;
            }
            if (lo..=hi).contains(&space.flops_ratio(&a)?) {
                seen.insert(a.clone());
                out.push(a);
            }
        }
    }
    if out.len() < n_p {
        return Err(PoolError::Infeasible { wanted: n_p, found: out.len(), attempts });
    }
    Ok(out)
}

impl Pool {
    pub fn new(archs: Vec<ArchSpec>, alpha: f64, k: u64, t_shr: u64) -> Result<Self, PoolError> {
        if archs.is_empty() {
            return Err(PoolError::Schedule("empty pool".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(PoolError::Schedule(format!("alpha {alpha} outside (0, 1)")));
        }
        if k == 0 || t_shr < k {
            return Err(PoolError::Schedule(format!("need 1 <= k <= T_shr, got k={k}, T_shr={t_shr}")));
        }
        let distinct: HashSet<&ArchSpec> = archs.iter().collect();
        if distinct.len() != archs.len() {
            return Err(PoolError::Schedule("duplicate architectures".into()));
        }
        let n_p = archs.len();
        Ok(Self {
            entries: archs.into_iter().map(|arch| ScoredArch { arch, score: None, updates: 0 }).collect(),
            alpha,
            rule: ScoreRule::Ema,
            k,
            t_shr,
            n_p,
            n_shr: shrink_count(k, n_p as u64, t_shr) as usize,
            rounds_done: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Regular rounds happen at every multiple of `k` up to `T_shr`.
    pub fn total_rounds(&self) -> u64 {
        self.t_shr / self.k
    }

    /// Unscored entries first (uniformly among them), then uniform.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, ArchSpec) {
        let unscored: Vec<usize> = (0..self.entries.len()).filter(|&i| self.entries[i].score.is_none()).collect();
        let i = if unscored.is_empty() {
            rng.random_range(0..self.entries.len())
        } else {
            unscored[rng.random_range(0..unscored.len())]
        };
        (i, self.entries[i].arch.clone())
    }

    pub fn update_score(&mut self, index: usize, loss: f64) -> Result<f64, PoolError> {
        if !loss.is_finite() {
            return Err(PoolError::NonFinite(loss));
        }
        let len = self.entries.len();
        let (alpha, rule) = (self.alpha, self.rule);
        let e = self.entries.get_mut(index).ok_or(PoolError::Index { index, len })?;
        let next = match (e.score, rule) {
            (None, _) => loss,
            (Some(s), ScoreRule::Ema) => (1.0 - alpha) * s + alpha * loss,
            (Some(s), ScoreRule::Literal) => (1.0 - alpha * s) + alpha * loss,
        };
        e.score = Some(next);
        e.updates += 1;
        Ok(next)
    }

    /// Removes up to `n` of the highest-scored entries, never emptying the
    /// pool. Unscored entries are spared unless nothing is scored, in which
    /// case the victims are drawn uniformly. Equal scores lose the later
    /// entry first. With `last_round` only the lowest score survives.
    pub fn shrink<R: Rng + ?Sized>(&mut self, n: usize, last_round: bool, rng: &mut R) -> Vec<ScoredArch> {
        let len = self.entries.len();
        let scored: Vec<usize> = (0..len).filter(|&i| self.entries[i].score.is_some()).collect();
        let mut victims: Vec<usize> = if scored.is_empty() {
            let mut idx: Vec<usize> = (0..len).collect();
            let take = if last_round { len - 1 } else { n.min(len - 1) };
            // Partial Fisher-Yates keeps the draw seed-deterministic.
            for i in 0..take {
                let j = rng.random_range(i..len);
                idx.swap(i, j);
            }
            idx.truncate(take);
            idx
        } else {
            let mut order = scored.clone();
            order.sort_by(|&a, &b| {
                let (sa, sb) = (self.entries[a].score.unwrap(), self.entries[b].score.unwrap());
                sb.total_cmp(&sa).then(b.cmp(&a))
            });
            if last_round {
                let keep = *order.last().expect("non-empty");
                (0..len).filter(|&i| i != keep).collect()
            } else {
                order.truncate(n.min(len - 1));
                order
            }
        };
        let removed: Vec<ScoredArch> = victims.iter().map(|&i| self.entries[i].clone()).collect();
        victims.sort_unstable();
        for &i in victims.iter().rev() {
            self.entries.remove(i);
        }
        removed
    }

    /// The shrink due at step `t`, if any: `N_shr` removals at multiples of
    /// `k` up to `T_shr`, and a forced reduction to one entry at the last.
    pub fn scheduled_shrink<R: Rng + ?Sized>(&mut self, t: u64, rng: &mut R) -> Option<Vec<ScoredArch>> {
        if t == 0 || !t.is_multiple_of(self.k) || t > self.t_shr {
            return None;
        }
        self.rounds_done += 1;
        let last = self.rounds_done == self.total_rounds();
        Some(self.shrink(self.n_shr, last, rng))
    }

    pub fn save(&self, path: &Path) -> Result<(), PoolError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PoolError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn sample_from_pool<R: Rng + ?Sized>(pool: &Pool, rng: &mut R) -> (usize, ArchSpec) {
    pool.sample(rng)
}

pub fn update_score(pool: &mut Pool, index: usize, loss: f64) -> Result<f64, PoolError> {
    pool.update_score(index, loss)
}
