//! WebAssembly bindings for the demo page. Every export returns a JSON string.
//!
//! The `*_json` functions hold the logic and are plain Rust so they can be
//! tested natively; the `#[wasm_bindgen]` wrappers only convert errors.

use serde::Serialize;
use wasm_bindgen::prelude::*;
use wstoch_core::barycenter::{run_barycenter, BarycenterProblem, BarycenterVariant};
use wstoch_core::instances::{grid_problem, GridMu};
use wstoch_core::measures::{build_cost_matrix, kl_divergence};
use wstoch_core::oracle::full_batch_ascent;
use wstoch_core::simplex::{run, Checkpoints, RunStatus, ScheduleKind, SolverConfig, StepSchedule};
use wstoch_core::{CostFunction, DiscreteMeasure, RegParams, SupportPoints};

const MAX_GRID: usize = 200;
const MAX_STEPS: u64 = 5_000_000;

#[derive(Serialize)]
struct EstimateView {
    mu: Vec<f64>,
    estimate: Vec<f64>,
    /// Row-major `n x n`.
    plan: Vec<f64>,
    kl: f64,
    status: String,
}

#[derive(Serialize)]
struct BarycenterView {
    inputs: Vec<Vec<f64>>,
    estimate: Vec<f64>,
    status: String,
}

#[derive(Serialize)]
struct CurveView {
    t: Vec<u64>,
    kl: Vec<f64>,
    status: String,
}

fn status_text(status: &RunStatus) -> String {
    match status {
        RunStatus::Completed => "completed".into(),
        RunStatus::Diverged { step, .. } => format!("diverged at step {step}"),
    }
}

fn check_sizes(n: usize, steps: u64) -> Result<(), String> {
    if !(2..=MAX_GRID).contains(&n) {
        return Err(format!("grid size must be in 2..={MAX_GRID}"));
    }
    if !(1..=MAX_STEPS).contains(&steps) {
        return Err(format!("steps must be in 1..={MAX_STEPS}"));
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("views serialize")
}

/// Bimodal measure on an `n`-grid with cost `|i - j|`: estimate and transport plan.
pub fn estimate_grid_json(n: usize, epsilon: f64, steps: u64, c0: f64, seed: u64) -> Result<String, String> {
    check_sizes(n, steps)?;
    let reg = RegParams::new(epsilon, 2.0 * epsilon).map_err(|e| e.to_string())?;
    let p = grid_problem(n, &GridMu::Bimodal, seed, reg, None).map_err(|e| e.to_string())?;
    let schedule = StepSchedule::for_problem(ScheduleKind::Combined, &p, c0).map_err(|e| e.to_string())?;
    let out = run(&p, &SolverConfig::new(steps, seed, schedule), None).map_err(|e| e.to_string())?;
    let plan = p
        .plan_matrix(&out.state.a_bar(), &out.state.b_bar())
        .map_err(|e| e.to_string())?;
    let kl = kl_divergence(p.mu(), &out.estimate).map_err(|e| e.to_string())?;
    Ok(to_json(&EstimateView {
        mu: p.mu().weights().to_vec(),
        estimate: out.estimate.weights().to_vec(),
        plan,
        kl,
        status: status_text(&out.status),
    }))
}

fn bump(n: usize, center: f64, width: f64) -> Vec<f64> {
    (0..n)
        .map(|i| (-0.5 * ((i as f64 - center) / width).powi(2)).exp() + 1e-6)
        .collect()
}

/// Barycenter of two Gaussian bumps on an `n`-grid with squared-distance cost.
/// `weight` is the share of the left bump.
#[allow(clippy::too_many_arguments)]
pub fn barycenter_json(
    n: usize,
    left: f64,
    right: f64,
    width: f64,
    weight: f64,
    epsilon: f64,
    steps: u64,
    variant: &str,
    seed: u64,
) -> Result<String, String> {
    check_sizes(n, steps)?;
    let variant: BarycenterVariant = variant.parse().map_err(|e: wstoch_core::Error| e.to_string())?;
    let support = SupportPoints::new((0..n).map(|i| vec![i as f64 / (n - 1) as f64]).collect()).map_err(|e| e.to_string())?;
    let inputs = [left, right]
        .iter()
        .map(|&c| DiscreteMeasure::new(bump(n, c * (n - 1) as f64, width * n as f64), support.clone()))
        .collect::<wstoch_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let beta = DiscreteMeasure::uniform(support.clone()).map_err(|e| e.to_string())?;
    let cost = build_cost_matrix(&support, &support, CostFunction::SquaredEuclidean).map_err(|e| e.to_string())?;
    let reg = RegParams::new(epsilon, 2.0 * epsilon).map_err(|e| e.to_string())?;
    let bp = BarycenterProblem::new(inputs.clone(), vec![weight, 1.0 - weight], beta, vec![cost.clone(), cost], reg, None)
        .map_err(|e| e.to_string())?;
    let schedule = StepSchedule::new(ScheduleKind::Combined, bp.lambda(), 1.0, epsilon).map_err(|e| e.to_string())?;
    let out = run_barycenter(&bp, &SolverConfig::new(steps, seed, schedule), variant, None).map_err(|e| e.to_string())?;
    Ok(to_json(&BarycenterView {
        inputs: inputs.iter().map(|m| m.weights().to_vec()).collect(),
        estimate: out.estimate.weights().to_vec(),
        status: status_text(&out.status),
    }))
}

/// KL to the exact solution along a run on the bimodal grid problem.
pub fn convergence_curve_json(n: usize, epsilon: f64, steps: u64, c0: f64, seed: u64) -> Result<String, String> {
    check_sizes(n, steps)?;
    let reg = RegParams::new(epsilon, 2.0 * epsilon).map_err(|e| e.to_string())?;
    let p = grid_problem(n, &GridMu::Bimodal, 0, reg, None).map_err(|e| e.to_string())?;
    let target = full_batch_ascent(&p, 1e-10, 500).map_err(|e| e.to_string())?.nu_star;
    let schedule = StepSchedule::for_problem(ScheduleKind::Combined, &p, c0).map_err(|e| e.to_string())?;
    let cfg = SolverConfig::new(steps, seed, schedule).with_checkpoints(Checkpoints::log_spaced(steps, 10));
    let out = run(&p, &cfg, Some(&target)).map_err(|e| e.to_string())?;
    Ok(to_json(&CurveView {
        t: out.metrics.rows.iter().map(|r| r.t).collect(),
        kl: out.metrics.rows.iter().map(|r| r.kl_to_reference.unwrap_or(f64::NAN)).collect(),
        status: status_text(&out.status),
    }))
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn estimate_grid(n: usize, epsilon: f64, steps: u32, c0: f64, seed: u32) -> Result<String, JsValue> {
    js(estimate_grid_json(n, epsilon, steps.into(), c0, seed.into()))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn barycenter(
    n: usize,
    left: f64,
    right: f64,
    width: f64,
    weight: f64,
    epsilon: f64,
    steps: u32,
    variant: &str,
    seed: u32,
) -> Result<String, JsValue> {
    js(barycenter_json(n, left, right, width, weight, epsilon, steps.into(), variant, seed.into()))
}

#[wasm_bindgen]
pub fn convergence_curve(n: usize, epsilon: f64, steps: u32, c0: f64, seed: u32) -> Result<String, JsValue> {
    js(convergence_curve_json(n, epsilon, steps.into(), c0, seed.into()))
}
