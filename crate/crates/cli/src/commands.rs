//! The `run`, `compare` and `calibrate` commands.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use echo_core::{
    clean_motion_loss, motion_fidelity_toy, nfe_report, temporal_consistency_toy, BundleCache, LatentVideo,
    ReferenceBundle, RunKind, SamplerTrace, Stage, World,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};
use crate::trace_io::write_trace;

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub deterministic: bool,
    pub jobs: Option<usize>,
}

/// Loads a config, applies overrides and validates it.
pub fn prepare(path: &Path, overrides: &Overrides) -> Result<(ExperimentConfig, World), ConfigError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seeds) = &overrides.seeds {
        cfg.seeds = seeds.clone();
    }
    if overrides.deterministic {
        cfg.deterministic = true;
    }
    if let Some(out) = &overrides.out {
        cfg.out = Some(out.clone());
    }
    let (world, warnings) = cfg.validate()?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok((cfg, world))
}

/// Outcome of one (kind, seed) run.
pub struct RunResult {
    pub kind: RunKind,
    pub seed: u64,
    pub outcome: std::result::Result<(LatentVideo, SamplerTrace), String>,
}

/// Per-run metrics, one row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub kind: String,
    pub seed: u64,
    pub status: String,
    pub final_motion_loss: Option<f64>,
    pub motion_fidelity: Option<f64>,
    pub temporal_consistency: Option<f64>,
    pub student_nfe: Option<u64>,
    pub teacher_nfe: Option<u64>,
    pub gradient_evals: Option<u64>,
    pub activated_steps: Option<u64>,
    pub inner_steps: Option<u64>,
    pub truncated_threshold: Option<u64>,
    pub truncated_n_max: Option<u64>,
}

impl RunResult {
    pub fn metrics(&self, world: &World, bundle: &ReferenceBundle) -> MetricsRow {
        let mut row = MetricsRow {
            kind: self.kind.name().to_string(),
            seed: self.seed,
            status: "ok".into(),
            final_motion_loss: None,
            motion_fidelity: None,
            temporal_consistency: None,
            student_nfe: None,
            teacher_nfe: None,
            gradient_evals: None,
            activated_steps: None,
            inner_steps: None,
            truncated_threshold: None,
            truncated_n_max: None,
        };
        match &self.outcome {
            Err(e) => row.status = format!("error: {e}"),
            Ok((x, trace)) => {
                let nfe = nfe_report(trace);
                row.final_motion_loss = clean_motion_loss(x, bundle).ok();
                row.motion_fidelity = motion_fidelity_toy(x, &world.reference);
                row.temporal_consistency = temporal_consistency_toy(x);
                row.student_nfe = Some(nfe.student_nfe);
                row.teacher_nfe = Some(nfe.teacher_nfe);
                row.gradient_evals = Some(nfe.gradient_evals);
                row.activated_steps = Some(nfe.activated_steps);
                row.inner_steps = Some(nfe.inner_steps);
                row.truncated_threshold = Some(nfe.truncated_threshold);
                row.truncated_n_max = Some(nfe.truncated_n_max);
            }
        }
        row
    }
}

pub fn bundle_for(cfg: &ExperimentConfig, world: &World) -> Result<ReferenceBundle> {
    let cache = cfg.bundle_cache.as_ref().map(BundleCache::new);
    world
        .bundle(&cfg.guidance, cache.as_ref())
        .context("building the reference bundle")
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(n.max(1));
    }
    Ok(b.build()?)
}

/// Runs every (kind, seed) pair of `cfg`, in parallel, returning results in
/// config order (kinds outer, seeds inner).
pub fn execute(
    cfg: &ExperimentConfig,
    world: &World,
    bundle: &ReferenceBundle,
    kinds: &[RunKind],
    jobs: Option<usize>,
) -> Result<Vec<RunResult>> {
    let tasks: Vec<(RunKind, u64)> = kinds
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results = pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(kind, seed)| RunResult {
                kind,
                seed,
                outcome: world
                    .run(kind, &cfg.guidance, bundle, seed, cfg.deterministic)
                    .map_err(|e| e.to_string()),
            })
            .collect()
    });
    Ok(results)
}

fn mean_se(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub kind: String,
    pub runs: usize,
    pub failed: usize,
    pub final_motion_loss_mean: Option<f64>,
    pub final_motion_loss_se: Option<f64>,
    pub motion_fidelity_mean: Option<f64>,
    pub motion_fidelity_se: Option<f64>,
    pub temporal_consistency_mean: Option<f64>,
    pub temporal_consistency_se: Option<f64>,
    pub teacher_nfe_total: u64,
    pub student_nfe_total: u64,
    pub status: String,
}

pub fn summarize(rows: &[MetricsRow], kinds: &[RunKind]) -> Vec<SummaryRow> {
    kinds
        .iter()
        .map(|k| {
            let mine: Vec<&MetricsRow> = rows.iter().filter(|r| r.kind == k.name()).collect();
            let col =
                |f: fn(&MetricsRow) -> Option<f64>| mean_se(&mine.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let (l, ls) = col(|r| r.final_motion_loss);
            let (f, fs) = col(|r| r.motion_fidelity);
            let (c, cs) = col(|r| r.temporal_consistency);
            let failed = mine.iter().filter(|r| r.status != "ok").count();
            SummaryRow {
                kind: k.name().to_string(),
                runs: mine.len(),
                failed,
                final_motion_loss_mean: l,
                final_motion_loss_se: ls,
                motion_fidelity_mean: f,
                motion_fidelity_se: fs,
                temporal_consistency_mean: c,
                temporal_consistency_se: cs,
                teacher_nfe_total: mine.iter().filter_map(|r| r.teacher_nfe).sum(),
                student_nfe_total: mine.iter().filter_map(|r| r.student_nfe).sum(),
                status: if failed == 0 {
                    "complete".into()
                } else {
                    "partial".into()
                },
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

pub fn trace_path(out: &Path, kind: RunKind, seed: u64) -> PathBuf {
    out.join("traces").join(kind.name()).join(format!("seed_{seed}.jsonl"))
}

/// What `cmd_run` wrote.
pub struct RunReport {
    pub out: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub summary: Vec<SummaryRow>,
}

impl RunReport {
    pub fn failed(&self) -> usize {
        self.summary.iter().map(|s| s.failed).sum()
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

/// The config as recorded next to its outputs (no output path, so that
/// moving a run does not change its bytes).
fn recorded(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        out: None,
        ..cfg.clone()
    }
}

pub fn cmd_run(config: &Path, overrides: &Overrides) -> Result<RunReport> {
    let (cfg, world) = prepare(config, overrides)?;
    let out = out_dir(&cfg);
    let bundle = bundle_for(&cfg, &world)?;
    let results = execute(&cfg, &world, &bundle, &cfg.kinds, overrides.jobs)?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), recorded(&cfg).to_toml())?;
    let mut rows = Vec::with_capacity(results.len());
    for r in &results {
        if let Ok((_, trace)) = &r.outcome {
            let path = trace_path(&out, r.kind, r.seed);
            fs::create_dir_all(path.parent().unwrap())?;
            let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_trace(trace, BufWriter::new(f))?;
        }
        rows.push(r.metrics(&world, &bundle));
    }
    write_csv(&out.join("metrics.csv"), &rows)?;
    let summary = summarize(&rows, &cfg.kinds);
    write_csv(&out.join("summary.csv"), &summary)?;
    Ok(RunReport { out, rows, summary })
}

/// Linear-interpolation percentile (`p` in `[0, 1]`) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let x = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
    Some(v[lo] + (v[hi] - v[lo]) * (x - lo as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub delta1: f64,
    pub delta2: f64,
    pub delta1_percentile: f64,
    pub delta2_percentile: f64,
    /// Number of gated student-motion steps the percentiles are taken over.
    pub gated_losses: usize,
    pub seeds: Vec<u64>,
}

impl Calibration {
    pub fn from_losses(losses: &[f64], p1: f64, p2: f64, seeds: Vec<u64>) -> Option<Self> {
        Some(Self {
            delta1: percentile(losses, p1)?,
            delta2: percentile(losses, p2)?,
            delta1_percentile: p1,
            delta2_percentile: p2,
            gated_losses: losses.len(),
            seeds,
        })
    }
}

/// Student-motion losses at every gated step of the given traces.
pub fn gated_losses<'a>(traces: impl IntoIterator<Item = &'a SamplerTrace>) -> Vec<f64> {
    traces
        .into_iter()
        .flat_map(|t| t.records.iter())
        .filter(|r| r.stage != Stage::NoGuidance)
        .map(|r| r.motion_loss)
        .collect()
}

pub fn cmd_calibrate(config: &Path, overrides: &Overrides) -> Result<(PathBuf, Calibration)> {
    let (cfg, world) = prepare(config, overrides)?;
    let out = out_dir(&cfg);
    let bundle = bundle_for(&cfg, &world)?;
    let results = execute(&cfg, &world, &bundle, &[RunKind::StudentMotion], overrides.jobs)?;
    let mut traces = Vec::new();
    for r in &results {
        match &r.outcome {
            Ok((_, t)) => traces.push(t),
            Err(e) => bail!("student_motion seed {} failed: {e}", r.seed),
        }
    }
    let losses = gated_losses(traces);
    let c = &cfg.calibration;
    let cal = Calibration::from_losses(&losses, c.delta1_percentile, c.delta2_percentile, cfg.seeds.clone())
        .context("no gated steps to calibrate on (tau = 1?)")?;
    fs::create_dir_all(&out)?;
    let path = out.join("calibration.toml");
    fs::write(&path, toml::to_string(&cal)?)?;
    Ok((path, cal))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub axis: String,
    pub x: f64,
    pub kind: String,
    pub runs: usize,
    pub final_motion_loss_mean: Option<f64>,
    pub final_motion_loss_se: Option<f64>,
    pub motion_fidelity_mean: Option<f64>,
    pub motion_fidelity_se: Option<f64>,
    pub temporal_consistency_mean: Option<f64>,
    pub temporal_consistency_se: Option<f64>,
    pub teacher_nfe_mean: Option<f64>,
    pub teacher_nfe_se: Option<f64>,
    pub student_nfe_mean: Option<f64>,
    pub student_nfe_se: Option<f64>,
    /// Differences of the means against the first run directory, same kind.
    pub d_final_motion_loss: Option<f64>,
    pub d_motion_fidelity: Option<f64>,
    pub d_temporal_consistency: Option<f64>,
    pub d_teacher_nfe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub axis: String,
    pub x: f64,
    pub kind: String,
    pub metric: String,
    pub y: Option<f64>,
    pub se: Option<f64>,
}

fn guidance_fields(cfg: &ExperimentConfig) -> Result<BTreeMap<String, toml::Value>> {
    let v = toml::Value::try_from(&cfg.guidance)?;
    Ok(v.as_table().cloned().unwrap_or_default().into_iter().collect())
}

/// Names the single guidance field that varies across `cfgs`, with each
/// config's numeric value on it; falls back to the run index.
fn sweep_axis(cfgs: &[ExperimentConfig]) -> Result<(String, Vec<f64>)> {
    let fields: Vec<_> = cfgs.iter().map(guidance_fields).collect::<Result<_>>()?;
    let keys: std::collections::BTreeSet<&String> = fields.iter().flat_map(|f| f.keys()).collect();
    let varying: Vec<&String> = keys
        .into_iter()
        .filter(|k| fields.iter().any(|f| f.get(*k) != fields[0].get(*k)))
        .collect();
    if let [key] = varying.as_slice() {
        let xs: Option<Vec<f64>> = fields
            .iter()
            .map(|f| match f.get(*key) {
                Some(toml::Value::Float(x)) => Some(*x),
                Some(toml::Value::Integer(i)) => Some(*i as f64),
                Some(toml::Value::String(s)) => s.parse().ok(),
                _ => None,
            })
            .collect();
        if let Some(xs) = xs {
            return Ok(((*key).clone(), xs));
        }
    }
    Ok(("run".into(), (0..cfgs.len()).map(|i| i as f64).collect()))
}

pub fn cmd_compare(dirs: &[PathBuf], out: &Path) -> Result<()> {
    if dirs.is_empty() {
        bail!("compare needs at least one run directory");
    }
    let mut cfgs = Vec::new();
    let mut tables = Vec::new();
    for d in dirs {
        let cfg =
            ExperimentConfig::load(&d.join("config.toml")).map_err(|e| anyhow::anyhow!("{}: {e}", d.display()))?;
        let rows: Vec<MetricsRow> = read_csv(&d.join("metrics.csv"))?;
        cfgs.push(cfg);
        tables.push(rows);
    }
    for (d, c) in dirs.iter().zip(&cfgs).skip(1) {
        if c.world != cfgs[0].world {
            bail!(
                "world spec of {} differs from {}; refusing to compare runs of different worlds",
                d.display(),
                dirs[0].display()
            );
        }
    }
    let (axis, xs) = sweep_axis(&cfgs)?;

    let mut kinds: Vec<String> = Vec::new();
    for t in &tables {
        for r in t {
            if !kinds.contains(&r.kind) {
                kinds.push(r.kind.clone());
            }
        }
    }
    let stats = |rows: &[MetricsRow], kind: &str| {
        let mine: Vec<&MetricsRow> = rows.iter().filter(|r| r.kind == kind && r.status == "ok").collect();
        let col =
            |f: &dyn Fn(&MetricsRow) -> Option<f64>| mean_se(&mine.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        (
            mine.len(),
            col(&|r| r.final_motion_loss),
            col(&|r| r.motion_fidelity),
            col(&|r| r.temporal_consistency),
            col(&|r| r.teacher_nfe.map(|v| v as f64)),
            col(&|r| r.student_nfe.map(|v| v as f64)),
        )
    };
    let diff = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
    let mut table = Vec::new();
    let mut series = Vec::new();
    for kind in &kinds {
        let base = stats(&tables[0], kind);
        for (i, rows) in tables.iter().enumerate() {
            let (n, l, f, c, t, s) = stats(rows, kind);
            if n == 0 {
                continue;
            }
            table.push(ComparisonRow {
                run: dirs[i].display().to_string(),
                axis: axis.clone(),
                x: xs[i],
                kind: kind.clone(),
                runs: n,
                final_motion_loss_mean: l.0,
                final_motion_loss_se: l.1,
                motion_fidelity_mean: f.0,
                motion_fidelity_se: f.1,
                temporal_consistency_mean: c.0,
                temporal_consistency_se: c.1,
                teacher_nfe_mean: t.0,
                teacher_nfe_se: t.1,
                student_nfe_mean: s.0,
                student_nfe_se: s.1,
                d_final_motion_loss: diff(l.0, base.1 .0),
                d_motion_fidelity: diff(f.0, base.2 .0),
                d_temporal_consistency: diff(c.0, base.3 .0),
                d_teacher_nfe: diff(t.0, base.4 .0),
            });
            for (metric, (y, se)) in [
                ("final_motion_loss", l),
                ("motion_fidelity", f),
                ("temporal_consistency", c),
                ("teacher_nfe", t),
                ("student_nfe", s),
            ] {
                series.push(SeriesRow {
                    axis: axis.clone(),
                    x: xs[i],
                    kind: kind.clone(),
                    metric: metric.into(),
                    y,
                    se,
                });
            }
        }
    }
    fs::create_dir_all(out)?;
    write_csv(&out.join("comparison.csv"), &table)?;
    write_csv(&out.join("series.csv"), &series)?;
    Ok(())
}
