//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::arch::{ArchSpec, WidthGrid};
use crate::pool::ScoreRule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("missing config key `{0}`")]
    Missing(String),
    #[error("unknown config key `{0}`")]
    Unknown(String),
    #[error("config key `{key}`: invalid value `{value}`: {msg}")]
    Invalid { key: String, value: String, msg: String },
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Gaussian { classes: usize, samples: usize, shape: Vec<usize>, spread: f64, modes: usize, seed: u64 },
    Csv { train: String, test: String, shape: Vec<usize>, classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Bundled model name or path to a `stpgraph v1` file.
    pub model: String,
    pub data: DataSource,
    pub t_total: u64,
    pub k: u64,
    pub t_shr: u64,
    pub n_p: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub target: f64,
    pub band: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub n_support: usize,
    pub score_rule: ScoreRule,
    pub widths: Vec<f64>,
    /// Penalty coefficient of the suppressed baseline.
    pub lambda: f64,
    /// Fixed architecture of the suppressed baseline; sampled when absent.
    pub arch: Option<ArchSpec>,
}

/// Keys and defaults; `None` marks a required key.
const KEYS: &[(&str, Option<&str>)] = &[
    ("model", None),
    ("dataset", None),
    ("T_total", None),
    ("k", None),
    ("T_shr", None),
    ("N_p", None),
    ("r", None),
    ("alpha", Some("0.3")),
    ("beta1", Some("1")),
    ("beta2", Some("1")),
    ("band", Some("0.03")),
    ("lr", Some("0.02")),
    ("momentum", Some("0.9")),
    ("weight_decay", Some("0.0005")),
    ("batch_size", Some("32")),
    ("seed", Some("0")),
    ("n_support", Some("1")),
    ("score_rule", Some("ema")),
    ("widths", Some("0.3,0.5,0.7,0.9,1.0")),
    ("lambda", Some("0.01")),
    ("arch", Some("")),
    ("classes", Some("10")),
    ("samples", Some("2000")),
    ("shape", Some("1x8x8")),
    ("spread", Some("1.0")),
    ("modes", Some("1")),
    ("data_seed", Some("")),
    ("train_csv", Some("")),
    ("test_csv", Some("")),
];

/// Raw key/value pairs before typing; later inserts override earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    pub values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Applies one `KEY=VALUE` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Invalid {
            key: assignment.to_string(),
            value: String::new(),
            msg: "expected KEY=VALUE".into(),
        })?;
        self.values.insert(k.trim().to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }
}

struct Typed<'a> {
    raw: &'a RawConfig,
}

impl Typed<'_> {
    fn text(&self, key: &str) -> Result<&str, ConfigError> {
        if let Some(v) = self.raw.values.get(key) {
            return Ok(v);
        }
        match KEYS.iter().find(|(k, _)| *k == key) {
            Some((_, Some(default))) => Ok(default),
            _ => Err(ConfigError::Missing(key.to_string())),
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.text(key)?;
        v.parse().map_err(|e: T::Err| invalid(key, v, e.to_string()))
    }

    fn shape(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        let v = self.text(key)?;
        v.split('x')
            .map(|d| d.trim().parse::<usize>().ok().filter(|d| *d > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| invalid(key, v, "expected dimensions like 1x8x8"))
    }
}

fn invalid(key: &str, value: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), value: value.into(), msg: msg.into() }
}

impl TrainConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        if let Some(k) = raw.values.keys().find(|k| !KEYS.iter().any(|(known, _)| known == k)) {
            return Err(ConfigError::Unknown(k.clone()));
        }
        let t = Typed { raw };
        let seed: u64 = t.get("seed")?;
        let data = match t.text("dataset")? {
            "gaussian" => DataSource::Gaussian {
                classes: t.get("classes")?,
                samples: t.get("samples")?,
                shape: t.shape("shape")?,
                spread: t.get("spread")?,
                modes: t.get("modes")?,
                seed: match t.text("data_seed")? {
                    "" => seed,
                    _ => t.get("data_seed")?,
                },
            },
            "csv" => {
                let train = t.text("train_csv")?.to_string();
                let test = t.text("test_csv")?.to_string();
                if train.is_empty() {
                    return Err(ConfigError::Missing("train_csv".into()));
                }
                if test.is_empty() {
                    return Err(ConfigError::Missing("test_csv".into()));
                }
                DataSource::Csv { train, test, shape: t.shape("shape")?, classes: t.get("classes")? }
            }
            other => return Err(invalid("dataset", other, "expected `gaussian` or `csv`")),
        };
        let score_rule = match t.text("score_rule")? {
            "ema" => ScoreRule::Ema,
            "literal" => ScoreRule::Literal,
            other => return Err(invalid("score_rule", other, "expected `ema` or `literal`")),
        };
        let widths_text = t.text("widths")?;
        let widths = widths_text
            .split(',')
            .map(|w| w.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| invalid("widths", widths_text, e.to_string()))?;
        WidthGrid::new(widths.clone()).map_err(|e| invalid("widths", widths_text, e.to_string()))?;
        let arch = match t.text("arch")? {
            "" => None,
            text => Some(text.parse().map_err(|e: crate::arch::ArchError| invalid("arch", text, e.to_string()))?),
        };
        let cfg = Self {
            model: t.text("model")?.to_string(),
            data,
            t_total: t.get("T_total")?,
            k: t.get("k")?,
            t_shr: t.get("T_shr")?,
            n_p: t.get("N_p")?,
            alpha: t.get("alpha")?,
            beta1: t.get("beta1")?,
            beta2: t.get("beta2")?,
            target: t.get("r")?,
            band: t.get("band")?,
            lr: t.get("lr")?,
            momentum: t.get("momentum")?,
            weight_decay: t.get("weight_decay")?,
            batch_size: t.get("batch_size")?,
            seed,
            n_support: t.get("n_support")?,
            score_rule,
            widths,
            lambda: t.get("lambda")?,
            arch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_raw(&RawConfig::parse(text)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, value: String, msg: &str| if ok { Ok(()) } else { Err(invalid(key, &value, msg)) };
        check(self.t_total >= 1, "T_total", self.t_total.to_string(), "must be at least 1")?;
        check(self.k >= 1, "k", self.k.to_string(), "must be at least 1")?;
        check(self.t_shr >= self.k && self.t_shr <= self.t_total, "T_shr", self.t_shr.to_string(), "need k <= T_shr <= T_total")?;
        check(self.n_p >= 1, "N_p", self.n_p.to_string(), "must be at least 1")?;
        check(self.alpha > 0.0 && self.alpha < 1.0, "alpha", self.alpha.to_string(), "must lie in (0, 1)")?;
        check(self.beta1 >= 0.0, "beta1", self.beta1.to_string(), "must be non-negative")?;
        check(self.beta2 >= 0.0, "beta2", self.beta2.to_string(), "must be non-negative")?;
        check(self.target > 0.0 && self.target <= 1.0, "r", self.target.to_string(), "must lie in (0, 1]")?;
        check(self.band > 0.0, "band", self.band.to_string(), "must be positive")?;
        check(self.lr >= 0.0, "lr", self.lr.to_string(), "must be non-negative")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", self.momentum.to_string(), "must lie in [0, 1)")?;
        check(self.weight_decay >= 0.0, "weight_decay", self.weight_decay.to_string(), "must be non-negative")?;
        check(self.batch_size >= 1, "batch_size", self.batch_size.to_string(), "must be at least 1")?;
        check(self.n_support >= 1, "n_support", self.n_support.to_string(), "must be at least 1")?;
        check(self.lambda >= 0.0, "lambda", self.lambda.to_string(), "must be non-negative")?;
        Ok(())
    }

    pub fn grid(&self) -> WidthGrid {
        WidthGrid::new(self.widths.clone()).expect("validated grid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "model = toy-cnn\ndataset = gaussian\nT_total = 100\nk = 10\nT_shr = 80\nN_p = 4\nr = 0.5\n";

    #[test]
    fn defaults_fill_optional_keys() {
        let c = TrainConfig::parse(MIN).unwrap();
        assert_eq!(c.alpha, 0.3);
        assert_eq!((c.beta1, c.beta2), (1.0, 1.0));
        assert_eq!(c.band, 0.03);
        assert_eq!(c.widths, vec![0.3, 0.5, 0.7, 0.9, 1.0]);
        assert!(matches!(c.data, DataSource::Gaussian { classes: 10, samples: 2000, .. }));
    }

    #[test]
    fn missing_key_is_named() {
        let text = MIN.replace("N_p = 4\n", "");
        assert_eq!(TrainConfig::parse(&text), Err(ConfigError::Missing("N_p".into())));
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let mut raw = RawConfig::parse(MIN).unwrap();
        raw.set("alpha=0.5").unwrap();
        assert_eq!(TrainConfig::from_raw(&raw).unwrap().alpha, 0.5);
        raw.set("colour=red").unwrap();
        assert_eq!(TrainConfig::from_raw(&raw), Err(ConfigError::Unknown("colour".into())));
    }

    #[test]
    fn schedule_is_validated() {
        let text = MIN.replace("T_shr = 80", "T_shr = 5");
        assert!(matches!(TrainConfig::parse(&text), Err(ConfigError::Invalid { key, .. }) if key == "T_shr"));
        let text = MIN.replace("r = 0.5", "r = 0");
        assert!(TrainConfig::parse(&text).is_err());
    }
}
