//! Browser bindings: cost estimation, FLOPs-constrained sampling and the
//! single-layer gradient check.
//!
//! Every export returns a JSON string; failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use stp::arch::{ArchSpace, ArchSpec, WidthGrid};
use stp::commands::{toy_check_report, cmd_estimate};
use stp::models::{bundled, BUNDLED};
use stp::trainer::RawConfig;
use wasm_bindgen::prelude::wasm_bindgen;

fn err(msg: impl ToString) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

/// Names of the bundled models as a JSON array.
#[wasm_bindgen]
pub fn models() -> String {
    json!(BUNDLED).to_string()
}

/// FLOPs and parameters of `arch` (empty for the full network) on a bundled
/// model.
#[wasm_bindgen]
pub fn estimate(model: &str, arch: &str) -> String {
    if bundled(model).is_none() {
        return err(format!("unknown model `{model}`"));
    }
    let mut raw = RawConfig::default();
    raw.insert("model", model);
    raw.insert("arch", arch);
    match cmd_estimate(&raw) {
        Ok(text) => serde_json::from_str::<Value>(&text).map_or_else(err, |v| v.to_string()),
        Err(e) => err(e),
    }
}

/// Draws `count` distinct architectures whose FLOPs ratio lies within
/// `band` of `target`.
#[wasm_bindgen]
pub fn sample(model: &str, target: f64, band: f64, count: u32, seed: u64) -> String {
    let Some(graph) = bundled(model) else {
        return err(format!("unknown model `{model}`"));
    };
    let space = match ArchSpace::new(&graph, WidthGrid::default()) {
        Ok(s) => s,
        Err(e) => return err(e),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Value> = Vec::new();
    let mut seen: Vec<ArchSpec> = Vec::new();
    for _ in 0..count.saturating_mul(20) {
        if out.len() == count as usize {
            break;
        }
        let a = match space.sample_capped(target, band, 20_000, &mut rng) {
            Ok(a) => a,
            Err(e) => return err(e),
        };
        if seen.contains(&a) {
            continue;
        }
        let (fr, pr) = match (space.flops_ratio(&a), space.params_ratio(&a)) {
            (Ok(f), Ok(p)) => (f, p),
            (Err(e), _) | (_, Err(e)) => return err(e),
        };
        out.push(json!({ "arch": a.to_string(), "flops_ratio": fr, "params_ratio": pr }));
        seen.push(a);
    }
    json!(out).to_string()
}

/// Finite-difference and Taylor-order checks on `trials` random
/// single-layer models.
#[wasm_bindgen]
pub fn grad_check(trials: u32, seed: u64) -> String {
    let mut raw = RawConfig::default();
    raw.insert("trials", trials);
    raw.insert("seed", seed);
    match toy_check_report(&raw) {
        Ok(r) => serde_json::to_value(&r).map_or_else(err, |v| v.to_string()),
        Err(e) => err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn estimate_reports_ratios() {
        let v = parse(&estimate("resnet50-cifar", "((2, 3, 4, 2), (0.3, 0.3, 0.3, 0.7))"));
        assert!((v["flops_ratio"].as_f64().unwrap() - 0.1489).abs() <= 0.015);
        assert_eq!(parse(&estimate("toy-cnn", ""))["flops_ratio"], 1.0);
        assert!(parse(&estimate("toy-cnn", "((1,"))["error"].is_string());
        assert!(parse(&estimate("vgg", ""))["error"].is_string());
    }

    #[test]
    fn samples_are_distinct_and_in_band() {
        let v = parse(&sample("toy-cnn", 0.5, 0.1, 5, 3));
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), 5);
        for r in rows {
            let f = r["flops_ratio"].as_f64().unwrap();
            assert!((0.45..=0.55).contains(&f));
        }
        assert_eq!(sample("toy-cnn", 0.5, 0.1, 5, 3), sample("toy-cnn", 0.5, 0.1, 5, 3));
    }

    #[test]
    fn grad_check_passes() {
        assert_eq!(parse(&grad_check(50, 0))["pass"], true);
        assert_eq!(parse(&models()).as_array().unwrap().len(), 3);
    }
}
