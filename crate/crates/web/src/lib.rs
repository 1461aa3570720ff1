//! Browser bindings for the simulator: run a small experiment, step the
//! server second-moment rules, and lay out a task schedule.
//!
//! Each export is a thin wrapper over a plain function returning JSON so the
//! logic is testable natively.

use std::collections::BTreeMap;

use fedcl::config::{from_flat, KEYS};
use fedcl::federation::{second_moment, ServerKind};
use fedcl::numerics::{derive_stream, Purpose};
use fedcl::schedule::{build_schedule, OrderingCase};
use fedcl::svg::{render_svg, Series};
use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest `rounds × clients × tasks` accepted from the page.
const MAX_WORK: usize = 200_000;

#[derive(Serialize)]
struct RunView {
    acc: f64,
    bwt_f: Option<f64>,
    per_task: Vec<Vec<f64>>,
    client_drift: Vec<Option<f64>>,
    accuracy_svg: String,
    cosine_svg: String,
}

/// Run an experiment described by a flat JSON object of config keys.
pub fn run_json(config: &str) -> Result<String, String> {
    let doc: BTreeMap<String, Value> = serde_json::from_str(config).map_err(|e| e.to_string())?;
    if let Some(k) = doc.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(format!("unknown key {k:?}"));
    }
    let cfg = from_flat(doc).map_err(|e| e.to_string())?;
    if cfg.rounds * cfg.clients * cfg.tasks > MAX_WORK {
        return Err("experiment too large for the browser demo".into());
    }
    let sim = fedcl::simulate(&cfg).map_err(|e| e.to_string())?;
    let per_task: Vec<Vec<f64>> = (0..cfg.tasks)
        .map(|t| sim.accuracy.row(t).into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
        .collect();
    let named = |f: &dyn Fn(usize) -> Vec<f64>| -> Vec<Series> {
        (0..cfg.tasks).map(|t| Series::new(format!("task {}", t + 1), f(t))).collect()
    };
    let accuracy_svg = render_svg(
        "Test accuracy per task",
        "round",
        "accuracy",
        &named(&|t| per_task[t].clone()),
    )
    .map_err(|e| e.to_string())?;
    let cosine_svg = render_svg(
        "Head cosine distance between rounds",
        "round",
        "cosine distance",
        &named(&|t| sim.drift.task_cosine(t)),
    )
    .map_err(|e| e.to_string())?;
    let view = RunView {
        acc: sim.acc().map_err(|e| e.to_string())?,
        bwt_f: sim.bwt_f(&cfg).map_err(|e| e.to_string())?,
        per_task,
        client_drift: sim.drift.client_drift.clone(),
        accuracy_svg,
        cosine_svg,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

/// Feed the same pseudo-gradient sequence through every second-moment rule,
/// starting from `v0`. Returns `{kind: [v_1, ...]}` plus an SVG.
pub fn moments_json(beta2: f64, v0: f64, deltas: &[f64]) -> Result<String, String> {
    if deltas.is_empty() {
        return Err("need at least one delta".into());
    }
    if !(0.0..1.0).contains(&beta2) || !(v0 >= 0.0) {
        return Err("need 0 <= beta2 < 1 and v0 >= 0".into());
    }
    let mut out = serde_json::Map::new();
    let mut series = Vec::new();
    for kind in [ServerKind::FedAdagrad, ServerKind::FedYogi, ServerKind::FedAdam] {
        let mut v = v0;
        let trace: Vec<f64> = deltas
            .iter()
            .map(|&d| {
                v = second_moment(kind, beta2, v, d);
                v
            })
            .collect();
        series.push(Series::new(kind.to_string(), trace.clone()));
        out.insert(kind.to_string(), json!(trace));
    }
    let svg = render_svg("Second moment v", "step", "v", &series).map_err(|e| e.to_string())?;
    out.insert("svg".into(), json!(svg));
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// `assignments[r-1][c]`, 1-indexed tasks.
pub fn schedule_json(case: &str, rounds: usize, tasks: usize, clients: usize, seed: u64) -> Result<String, String> {
    let case: OrderingCase = case.parse().map_err(|e: fedcl::Error| e.to_string())?;
    if rounds * clients > MAX_WORK {
        return Err("schedule too large for the browser demo".into());
    }
    let s = build_schedule(
        rounds,
        tasks,
        clients,
        case,
        &mut derive_stream(seed, 0, 0, Purpose::Schedule),
    )
    .map_err(|e| e.to_string())?;
    s.to_json().map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn run_simulation(config_json: &str) -> Result<String, JsError> {
    run_json(config_json).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn second_moment_trace(beta2: f64, v0: f64, deltas: Vec<f64>) -> Result<String, JsError> {
    moments_json(beta2, v0, &deltas).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn schedule_grid(case: &str, rounds: usize, tasks: usize, clients: usize, seed: u64) -> Result<String, JsError> {
    schedule_json(case, rounds, tasks, clients, seed).map_err(|e| JsError::new(&e))
}
