//! Browser bindings for the interactive demo in `www/`.
//!
//! Every export takes plain numbers or a JSON string and returns a JSON
//! string, so the page needs no generated TypeScript types. The `*_json`
//! functions hold the logic and are plain Rust, which keeps them testable
//! off the browser.

use dynamoe::routing::{
    compare_patterns, count_patterns_dynamic, count_patterns_fixed, dynamic_weights, gate_probs, k_max,
    select_dynamic, select_topk,
};
use dynamoe::schedules::{layer_expert_counts, schedule_value, ScheduleKind, ScheduleSpec};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const CURVE_SAMPLES: usize = 101;

/// Sampled curves and integer layer counts for every schedule kind.
pub fn schedule_curves_json(n_max: usize, n_min: usize, layers: usize) -> Result<String, String> {
    let mut kinds = Vec::new();
    for kind in ScheduleKind::ALL {
        let spec = ScheduleSpec::new(kind, n_max, n_min, layers).map_err(|e| e.to_string())?;
        let curve: Vec<[f64; 2]> = (0..CURVE_SAMPLES)
            .map(|i| {
                let t = i as f64 / (CURVE_SAMPLES - 1) as f64;
                Ok([t, schedule_value(kind, t, n_max, n_min)?])
            })
            .collect::<dynamoe::Result<_>>()
            .map_err(|e| e.to_string())?;
        let counts = layer_expert_counts(&spec).map_err(|e| e.to_string())?;
        let positions: Vec<f64> = (1..=layers).map(|l| spec.position(l)).collect();
        kinds.push(json!({
            "kind": kind.name(),
            "curve": curve,
            "positions": positions,
            "counts": counts,
            "total": counts.iter().sum::<usize>(),
        }));
    }
    Ok(json!({ "n_max": n_max, "n_min": n_min, "layers": layers, "kinds": kinds }).to_string())
}

/// Routes one token: gate probabilities from `logits`, then dynamic and
/// Top-K selections with their combination weights.
pub fn route_token_json(logits: &str, tau: f64, temperature: f64, k_fixed: usize) -> Result<String, String> {
    let logits: Vec<f64> = serde_json::from_str(logits).map_err(|e| format!("logits: {e}"))?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(format!("tau = {tau} not in (0, 1)"));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(format!("temperature = {temperature} must be positive"));
    }
    let gates = gate_probs(&logits).map_err(|e| e.to_string())?.0;
    let n = gates.len();

    let dynamic = select_dynamic(&gates, tau);
    let picked: Vec<f64> = dynamic.indices.iter().map(|&i| gates[i]).collect();
    let dyn_weights = dynamic_weights(&picked, temperature);

    let topk = select_topk(&gates, k_fixed.clamp(1, n)).map_err(|e| e.to_string())?;
    let topk_weights: Vec<f64> = topk.indices.iter().map(|&i| gates[i]).collect();

    let threshold = dynamic.threshold.filter(|t| t.is_finite());
    Ok(json!({
        "gates": gates,
        "k_max": k_max(tau, n),
        "dynamic": {
            "threshold": threshold,
            "indices": dynamic.indices,
            "weights": dyn_weights,
        },
        "topk": {
            "k": topk.indices.len(),
            "indices": topk.indices,
            "weights": topk_weights,
        },
    })
    .to_string())
}

/// Pattern counts for one `(n, τ, K)` plus the cumulative dynamic count
/// for every `K_max` up to `n`.
pub fn pattern_counts_json(n: usize, tau: f64, k_fixed: usize) -> Result<String, String> {
    let c = compare_patterns(n, tau, k_fixed).map_err(|e| e.to_string())?;
    let series: Vec<Value> = (1..=n)
        .map(|k| {
            Ok(json!({
                "k": k,
                "fixed": count_patterns_fixed(n, k)?.to_string(),
                "dynamic": count_patterns_dynamic(n, k)?.to_string(),
            }))
        })
        .collect::<dynamoe::Result<_>>()
        .map_err(|e| e.to_string())?;
    // u128 counts go out as strings; JavaScript numbers lose precision past 2^53.
    Ok(json!({
        "n": c.n,
        "tau": tau,
        "k_fixed": c.k_fixed,
        "k_max": c.k_max,
        "fixed": c.fixed.to_string(),
        "dynamic": c.dynamic.to_string(),
        "ratio": c.ratio,
        "lower_bound": c.lower_bound,
        "series": series,
    })
    .to_string())
}

fn to_js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = scheduleCurves)]
pub fn schedule_curves(n_max: usize, n_min: usize, layers: usize) -> Result<String, JsError> {
    to_js(schedule_curves_json(n_max, n_min, layers))
}

#[wasm_bindgen(js_name = routeToken)]
pub fn route_token(logits: &str, tau: f64, temperature: f64, k_fixed: usize) -> Result<String, JsError> {
    to_js(route_token_json(logits, tau, temperature, k_fixed))
}

#[wasm_bindgen(js_name = patternCounts)]
pub fn pattern_counts(n: usize, tau: f64, k_fixed: usize) -> Result<String, JsError> {
    to_js(pattern_counts_json(n, tau, k_fixed))
}
