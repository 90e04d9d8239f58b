//! Browser demo over the benchmark world. Each exported function takes a few
//! numbers from the page and returns a JSON string; the same functions are
//! callable natively for testing.

use echo_core::motion::{temporal_attention, AttentionMap, TemporalMask};
use echo_core::{
    clean_motion_loss, motion_fidelity_toy, nfe_report, temporal_consistency_toy, GuidanceConfig, RunKind, Stage,
    World, WorldSpec,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Guidance settings of `configs/benchmark.toml`, thresholds included.
pub fn benchmark_guidance() -> GuidanceConfig {
    GuidanceConfig {
        omega_student: 1.0,
        omega_teacher: 1.0,
        eta: 10.0,
        lambda: 0.3,
        tau: 0.1,
        k: 0.01,
        delta1: 0.17155421149938344,
        delta2: 0.11652705577202466,
        window: 1,
        n_max: 10,
        inner_start_fraction: 0.5,
        ..GuidanceConfig::default()
    }
}

fn guidance(eta: f64, lambda: f64, tau: f64) -> Result<GuidanceConfig, String> {
    let cfg = GuidanceConfig {
        eta,
        lambda,
        tau,
        ..benchmark_guidance()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn world() -> World {
    World::build(&WorldSpec::benchmark()).expect("the benchmark world is valid")
}

#[derive(Debug, Serialize)]
pub struct StepPoint {
    pub t: usize,
    pub loss: f64,
    pub stage: Stage,
    pub inner_steps: usize,
    pub teacher_nfe: u64,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub kind: &'static str,
    pub steps: Vec<StepPoint>,
    pub final_loss: f64,
    pub fidelity: Option<f64>,
    pub consistency: Option<f64>,
    pub teacher_nfe: u64,
    pub student_nfe: u64,
}

/// All four run kinds on one seed: per-step losses and stages, and the
/// final metrics.
pub fn compare_runs(seed: u64, eta: f64, lambda: f64, tau: f64) -> Result<Vec<RunSummary>, String> {
    let cfg = guidance(eta, lambda, tau)?;
    let world = world();
    let bundle = world.bundle(&cfg, None).map_err(|e| e.to_string())?;
    RunKind::ALL
        .iter()
        .map(|&kind| {
            let (x, trace) = world.run(kind, &cfg, &bundle, seed, false).map_err(|e| e.to_string())?;
            let nfe = nfe_report(&trace);
            Ok(RunSummary {
                kind: kind.name(),
                steps: trace
                    .records
                    .iter()
                    .map(|r| StepPoint {
                        t: r.t,
                        loss: r.motion_loss,
                        stage: r.stage,
                        inner_steps: r.inner_steps,
                        teacher_nfe: r.teacher_nfe,
                    })
                    .collect(),
                final_loss: clean_motion_loss(&x, &bundle).map_err(|e| e.to_string())?,
                fidelity: motion_fidelity_toy(&x, &world.reference),
                consistency: temporal_consistency_toy(&x),
                teacher_nfe: nfe.teacher_nfe,
                student_nfe: nfe.student_nfe,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct AttentionView {
    pub frames: usize,
    pub reference: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    pub sample: Vec<Vec<f64>>,
    pub kind: &'static str,
}

fn rows(a: &AttentionMap) -> Vec<Vec<f64>> {
    (0..a.frames()).map(|i| a.row(i).to_vec()).collect()
}

fn mask_rows(m: &TemporalMask) -> Vec<Vec<bool>> {
    (0..m.frames())
        .map(|i| (0..m.frames()).map(|j| m.get(i, j)).collect())
        .collect()
}

/// Reference attention, its mask, and the attention of one final sample.
pub fn attention(kind: &str, seed: u64, eta: f64, lambda: f64, tau: f64) -> Result<AttentionView, String> {
    let kind: RunKind = kind.parse().map_err(|e: echo_core::EchoError| e.to_string())?;
    let cfg = guidance(eta, lambda, tau)?;
    let world = world();
    let bundle = world.bundle(&cfg, None).map_err(|e| e.to_string())?;
    let (x, _) = world.run(kind, &cfg, &bundle, seed, false).map_err(|e| e.to_string())?;
    Ok(AttentionView {
        frames: x.frames(),
        reference: rows(&bundle.a_ref),
        mask: mask_rows(&bundle.mask),
        sample: rows(&temporal_attention(&x)),
        kind: kind.name(),
    })
}

#[derive(Debug, Serialize)]
pub struct SweepPoint {
    pub eta: f64,
    pub fidelity: f64,
    pub consistency: f64,
    pub teacher_nfe: f64,
}

/// Mean echo fidelity, consistency and teacher cost over seeds `0..seeds`
/// for each motion guidance strength.
pub fn eta_sweep(etas: &[f64], seeds: u64, lambda: f64, tau: f64) -> Result<Vec<SweepPoint>, String> {
    if seeds == 0 {
        return Err("need at least one seed".into());
    }
    let world = world();
    etas.iter()
        .map(|&eta| {
            let cfg = guidance(eta, lambda, tau)?;
            let bundle = world.bundle(&cfg, None).map_err(|e| e.to_string())?;
            let (mut f, mut c, mut n) = (0.0, 0.0, 0.0);
            for seed in 0..seeds {
                let (x, trace) = world
                    .run(RunKind::Echo, &cfg, &bundle, seed, false)
                    .map_err(|e| e.to_string())?;
                f += motion_fidelity_toy(&x, &world.reference).unwrap_or(0.0);
                c += temporal_consistency_toy(&x).unwrap_or(0.0);
                n += nfe_report(&trace).teacher_nfe as f64;
            }
            let s = seeds as f64;
            Ok(SweepPoint {
                eta,
                fidelity: f / s,
                consistency: c / s,
                teacher_nfe: n / s,
            })
        })
        .collect()
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = compareRuns)]
pub fn compare_runs_js(seed: u32, eta: f64, lambda: f64, tau: f64) -> Result<String, JsValue> {
    to_js(compare_runs(seed.into(), eta, lambda, tau))
}

#[wasm_bindgen(js_name = attentionMaps)]
pub fn attention_js(kind: &str, seed: u32, eta: f64, lambda: f64, tau: f64) -> Result<String, JsValue> {
    to_js(attention(kind, seed.into(), eta, lambda, tau))
}

#[wasm_bindgen(js_name = etaSweep)]
pub fn eta_sweep_js(etas: Vec<f64>, seeds: u32, lambda: f64, tau: f64) -> Result<String, JsValue> {
    to_js(eta_sweep(&etas, seeds.into(), lambda, tau))
}

#[wasm_bindgen(js_name = benchmarkGuidance)]
pub fn benchmark_guidance_js() -> String {
    serde_json::to_string(&benchmark_guidance()).expect("guidance serializes")
}
