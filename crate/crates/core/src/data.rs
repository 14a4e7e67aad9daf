//! Seeded synthetic datasets, CSV ingestion and deterministic batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("line {line}: {msg}")]
    Row { line: usize, msg: String },
    #[error("line {line}: label {label} outside [0, {classes})")]
    Label { line: usize, label: i64, classes: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, ...]`, one row per sample.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self, DataError> {
        let n = features.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(DataError::Spec(format!("{n} feature rows for {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Label { line: 0, label: l as i64, classes });
        }
        Ok(Self { features, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, batch axis excluded.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Rows `idx` stacked into a batch.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let row: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.features.data()[i * row..(i + 1) * row]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::new(shape, data), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Writes `label,f0,f1,...` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        let row: usize = self.sample_shape().iter().product();
        for (i, label) in self.labels.iter().enumerate() {
            let mut rec = vec![label.to_string()];
            // `{:?}` prints the shortest text that parses back to the same f64.
            rec.extend(self.features.data()[i * row..(i + 1) * row].iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Class-conditional Gaussian images or vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub classes: usize,
    pub samples: usize,
    /// Per-sample shape, e.g. `[1, 8, 8]` or `[16]`.
    pub shape: Vec<usize>,
    pub spread: f64,
    /// Cluster centres per class; more than one makes the classes
    /// non-linearly separable.
    pub modes: usize,
    pub seed: u64,
}

impl GaussianSpec {
    pub fn new(classes: usize, samples: usize, shape: &[usize], spread: f64, seed: u64) -> Self {
        Self { classes, samples, shape: shape.to_vec(), spread, modes: 1, seed }
    }
}

/// Draws the class means, then `mean + spread·noise` per sample with
/// balanced, shuffled labels; the first 80% of samples form the train split.
pub fn gen_gaussian_clusters(spec: &GaussianSpec) -> Result<(Dataset, Dataset), DataError> {
    let GaussianSpec { classes, samples, ref shape, spread, modes, seed } = *spec;
    if classes < 2 {
        return Err(DataError::Spec(format!("need at least 2 classes, got {classes}")));
    }
    if samples < 2 * classes {
        return Err(DataError::Spec(format!("need at least {} samples for {classes} classes", 2 * classes)));
    }
    if shape.is_empty() || shape.contains(&0) {
        return Err(DataError::Spec(format!("invalid sample shape {shape:?}")));
    }
    if modes == 0 || !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::Spec("modes must be positive and spread finite and non-negative".into()));
    }
    let dim: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<f64> = (0..classes * modes * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(samples * dim);
    for &label in &labels {
        let mode = rng.random_range(0..modes);
        let c = &centres[(label * modes + mode) * dim..][..dim];
        data.extend(c.iter().map(|m| m + spread * rng.sample::<f64, _>(StandardNormal)));
    }
    let n_train = samples * 4 / 5;
    let split_at = |lo: usize, hi: usize, split: Split| {
        let mut s = vec![hi - lo];
        s.extend_from_slice(shape);
        Dataset::new(Tensor::new(s, data[lo * dim..hi * dim].to_vec()), labels[lo..hi].to_vec(), classes, split)
    };
    Ok((split_at(0, n_train, Split::Train)?, split_at(n_train, samples, Split::Test)?))
}

/// Reads rows of `label, features...` (row-major features, no header).
pub fn load_csv(path: &Path, shape: &[usize], classes: usize, split: Split) -> Result<Dataset, DataError> {
    let dim: usize = shape.iter().product();
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_path(path)?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.len() != dim + 1 {
            return Err(DataError::Row { line, msg: format!("expected {} fields, found {}", dim + 1, rec.len()) });
        }
        let label: i64 =
            rec[0].parse().map_err(|_| DataError::Row { line, msg: format!("label `{}` is not an integer", &rec[0]) })?;
        if label < 0 || label as usize >= classes {
            return Err(DataError::Label { line, label, classes });
        }
        labels.push(label as usize);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| DataError::Row { line, msg: format!("feature `{field}` is not a finite number") })?;
            data.push(v);
        }
    }
    let mut s = vec![labels.len()];
    s.extend_from_slice(shape);
    Dataset::new(Tensor::new(s, data), labels, classes, split)
}

/// Endless fixed-size batches, reshuffled each epoch; the last partial
/// batch of an epoch is kept.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
    pub epoch: u64,
}

impl Batcher {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        Self::from_rng(len, batch, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(len: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        assert!(len > 0 && batch > 0, "empty dataset or batch");
        let mut b = Self { order: (0..len).collect(), pos: 0, batch, rng, epoch: 0 };
        b.order.shuffle(&mut b.rng);
        b
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    pub fn next_batch(&mut self, data: &Dataset) -> (Tensor, Vec<usize>) {
        data.gather(&self.next_indices())
    }
}
