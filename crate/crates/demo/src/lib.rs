//! Browser bindings: each export takes plain numbers and returns a JSON
//! string for the page to render.

use serde::Serialize;
use serde_json::json;
use spectral_adapter::adapters::{budget_table, scaling_formula, AdapterExtras, AdapterKind};
use spectral_adapter::rank::rank_capacity_empirical;
use spectral_adapter::rng::{gaussian_matrix, seeded};
use spectral_adapter::train::{experiment_rank_recovery, TrainConfig};
use wasm_bindgen::prelude::*;

/// Largest side the page may request; keeps the browser responsive.
pub const MAX_DIM: usize = 32;
pub const MAX_STEPS: usize = 20_000;
const CURVE_POINTS: usize = 200;

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn check_dims(n: usize, m: usize) -> Result<(), String> {
    if n == 0 || m == 0 || n > MAX_DIM || m > MAX_DIM {
        return Err(format!("dimensions must lie in 1..={MAX_DIM}, got {n}x{m}"));
    }
    Ok(())
}

/// Every `stride`-th loss plus the last.
fn thin(losses: &[f64]) -> Vec<(usize, f64)> {
    let stride = losses.len().div_ceil(CURVE_POINTS).max(1);
    let mut out: Vec<(usize, f64)> = losses.iter().copied().enumerate().step_by(stride).collect();
    if let Some(last) = losses.len().checked_sub(1) {
        if out.last().map(|p| p.0) != Some(last) {
            out.push((last, losses[last]));
        }
    }
    out
}

/// Rank capacity of every kind that supports a rank on one random base.
pub fn rank_capacity_report(n: usize, m: usize, rank: usize, trials: usize, seed: u64) -> Result<String, String> {
    check_dims(n, m)?;
    let w = gaussian_matrix(&mut seeded(seed), n, m, 1.0);
    let mut rows = Vec::new();
    for kind in [AdapterKind::LoRA, AdapterKind::SpectralA, AdapterKind::SVDiff, AdapterKind::SpectralR] {
        let row = match rank_capacity_empirical(kind, &w, rank, trials.clamp(1, 50), seed, None) {
            Ok(r) => json!({
                "kind": kind,
                "min_rank": r.min_rank_achieved,
                "max_rank": r.max_rank_achieved,
                "capacity": r.capacity,
            }),
            Err(e) => json!({"kind": kind, "error": e.to_string()}),
        };
        rows.push(row);
    }
    to_json(&json!({"n": n, "m": m, "rank": rank, "kinds": rows}))
}

/// LoRA against Spectral^A on the planted rank-recovery task.
pub fn rank_recovery_report(n: usize, m: usize, r: usize, steps: usize, seed: u64) -> Result<String, String> {
    check_dims(n, m)?;
    let cfg = TrainConfig {
        learning_rate: 0.01,
        steps: steps.min(MAX_STEPS),
        seed,
        ..TrainConfig::default()
    };
    let rep = experiment_rank_recovery(n, m, r, seed, &cfg).map_err(|e| e.to_string())?;
    to_json(&json!({
        "n": n,
        "m": m,
        "r": r,
        "singular_values": rep.singular_values,
        "lora_floor": rep.lora_floor,
        "lora": {"label": rep.lora.label, "distance": rep.lora.terminal_distance, "curve": thin(&rep.lora.losses)},
        "spectral": {"label": rep.spectral.label, "distance": rep.spectral.terminal_distance, "curve": thin(&rep.spectral.losses)},
    }))
}

/// Trainable-parameter count against rank for every kind on an `n x n` weight.
pub fn budget_report(n: usize, max_rank: usize) -> Result<String, String> {
    if n == 0 || n > 1 << 14 {
        return Err(format!("n must lie in 1..=16384, got {n}"));
    }
    let extras = AdapterExtras::default();
    let kinds: Vec<_> = AdapterKind::ALL
        .iter()
        .map(|&k| {
            json!({
                "kind": k,
                "scaling": scaling_formula(k),
                "points": budget_table(k, n, n, max_rank.min(256), &extras),
            })
        })
        .collect();
    to_json(&json!({"n": n, "kinds": kinds}))
}

#[wasm_bindgen]
pub fn rank_capacity(n: usize, m: usize, rank: usize, trials: usize, seed: u32) -> Result<String, JsValue> {
    rank_capacity_report(n, m, rank, trials, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn rank_recovery(n: usize, m: usize, r: usize, steps: usize, seed: u32) -> Result<String, JsValue> {
    rank_recovery_report(n, m, r, steps, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn budget_curves(n: usize, max_rank: usize) -> Result<String, JsValue> {
    budget_report(n, max_rank).map_err(|e| JsValue::from_str(&e))
}
