//! The adaptive teacher-guided student sampler.
//!
//! Each student step computes the unguided endpoint (CFG only) and, inside
//! the guidance window `t > tau * T`, the motion-guided endpoint. When the
//! windowed student motion loss exceeds `delta1` the teacher refines the
//! unguided endpoint over the fine grid, truncating on `delta2` or `n_max`,
//! and its endpoint is blended in with weight `lambda`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, EchoError, Result};
use crate::guidance::{cfg_epsilon, guided_epsilon, interpolate_x0, renoise, renoise_with, GuidanceConfig, InnerNoise};
use crate::inversion::blend_init;
use crate::latent::LatentVideo;
use crate::motion::{motion_loss, motion_loss_grad, ReferenceBundle};
use crate::rng::{NoiseStream, RunSeeds, RunStreams};
use crate::schedule::TimestepGrid;
use crate::toyworld::{one_step_x0, Condition, Denoiser};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    NoGuidance,
    MotionOnly,
    TeacherGuided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Truncation {
    Threshold,
    NMax,
    None,
}

/// What the sampler did at one student step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Student motion loss at this step, before any update.
    pub motion_loss: f64,
    pub window_avg: Option<f64>,
    pub stage: Stage,
    /// Teacher timestep the refinement started from.
    pub inner_start: Option<usize>,
    pub inner_steps: usize,
    /// Teacher motion losses checked before each inner iteration.
    pub inner_losses: Vec<f64>,
    pub truncated_by: Truncation,
    pub student_nfe: u64,
    pub teacher_nfe: u64,
    pub gradient_evals: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Echo,
    StudentPlain,
    StudentMotion,
    AlwaysTeacher,
}

impl RunKind {
    pub const ALL: [RunKind; 4] = [
        RunKind::Echo,
        RunKind::StudentPlain,
        RunKind::StudentMotion,
        RunKind::AlwaysTeacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunKind::Echo => "echo",
            RunKind::StudentPlain => "student_plain",
            RunKind::StudentMotion => "student_motion",
            RunKind::AlwaysTeacher => "always_teacher",
        }
    }

    /// The configuration a baseline actually runs with.
    pub fn apply(self, config: &GuidanceConfig) -> GuidanceConfig {
        let mut cfg = config.clone();
        match self {
            RunKind::Echo => {}
            RunKind::StudentPlain => cfg.tau = 1.0,
            RunKind::StudentMotion => cfg.delta1 = f64::INFINITY,
            RunKind::AlwaysTeacher => cfg.delta1 = f64::NEG_INFINITY,
        }
        cfg
    }
}

impl std::str::FromStr for RunKind {
    type Err = EchoError;

    fn from_str(s: &str) -> Result<Self> {
        RunKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid("kind", format!("unknown run kind `{s}`")))
    }
}

/// Full audit record of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerTrace {
    pub kind: RunKind,
    /// Effective configuration (after the run kind is applied).
    pub config: GuidanceConfig,
    pub total_steps: usize,
    pub student_steps: usize,
    pub teacher_steps: usize,
    pub seeds: RunSeeds,
    pub records: Vec<StepRecord>,
    pub final_latent: LatentVideo,
}

/// Most recent student motion losses, at most `capacity` of them.
#[derive(Clone, Debug)]
pub struct LossHistory {
    capacity: usize,
    values: VecDeque<f64>,
}

impl LossHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            values: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn push(&mut self, loss: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(loss);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            None
        } else {
            Some(self.values.iter().sum::<f64>() / self.values.len() as f64)
        }
    }
}

/// Activate iff the window mean exceeds `delta1`; an empty window activates.
pub fn should_activate(history: &LossHistory, delta1: f64) -> bool {
    history.mean().is_none_or(|m| m > delta1)
}

/// Student (coarse) and teacher (fine) grids over the same `T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grids {
    pub student: TimestepGrid,
    pub teacher: TimestepGrid,
}

impl Grids {
    pub fn new(student: TimestepGrid, teacher: TimestepGrid) -> Result<Self> {
        if student.total_steps() != teacher.total_steps() {
            return Err(invalid("grids", "student and teacher grids span different T"));
        }
        if !student.stride().is_multiple_of(teacher.stride()) {
            return Err(invalid(
                "grids",
                format!(
                    "student stride {} is not a multiple of teacher stride {}",
                    student.stride(),
                    teacher.stride()
                ),
            ));
        }
        Ok(Self { student, teacher })
    }

    pub fn total_steps(&self) -> usize {
        self.student.total_steps()
    }
}

/// Result of the teacher's inner refinement over one student interval.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherRefinement {
    /// Teacher endpoint predicted at `t - student stride`.
    pub x0: LatentVideo,
    pub start: usize,
    pub inner_steps: usize,
    pub truncated_by: Truncation,
    pub inner_losses: Vec<f64>,
}

fn guided_prediction<M: Denoiser + ?Sized>(
    model: &M,
    z: &LatentVideo,
    c: &Condition,
    t: usize,
    omega: f64,
    config: &GuidanceConfig,
    bundle: &ReferenceBundle,
) -> Result<(LatentVideo, LatentVideo)> {
    let eps_tilde = cfg_epsilon(model, z, c, t, omega)?;
    let grad = motion_loss_grad(z, bundle, model, c, t, config.gradient)?;
    // guided_epsilon subtracts eta * direction; feeding the negated gradient
    // moves the endpoint downhill on the motion loss
    let eps_hat = guided_epsilon(&eps_tilde, &grad.scale(-1.0), config.eta)?;
    let x0 = one_step_x0(z, &eps_hat, t, model.schedule())?;
    Ok((eps_hat, x0))
}

/// Inner teacher start for student step `t`: `t - fraction * stride`, snapped
/// down to the teacher grid and kept strictly above the interval's end.
pub fn inner_start(t: usize, config: &GuidanceConfig, grids: &Grids) -> usize {
    let ds = grids.student.stride();
    let dt = grids.teacher.stride();
    let target = t - ds;
    let raw = t as f64 - config.inner_start_fraction * ds as f64;
    grids
        .teacher
        .snap_down(raw.floor().max(0.0) as usize)
        .clamp(target + dt, t)
}

/// Teacher refinement of the student's unguided endpoint `x0_tilde` across
/// the student interval `(t - stride, t)`.
#[allow(clippy::too_many_arguments)]
pub fn teacher_refine<M: Denoiser + ?Sized>(
    x0_tilde: &LatentVideo,
    t: usize,
    config: &GuidanceConfig,
    teacher: &M,
    bundle: &ReferenceBundle,
    c: &Condition,
    grids: &Grids,
    noise: &mut NoiseStream,
) -> Result<TeacherRefinement> {
    grids.student.check(t)?;
    let ds = grids.student.stride();
    let dt = grids.teacher.stride();
    if t <= ds {
        return Err(invalid("t", format!("no student interval below t={t} to refine into")));
    }
    let schedule = teacher.schedule();
    let target = t - ds;
    let start = inner_start(t, config, grids);

    let move_to = |x0: &LatentVideo, eps: &LatentVideo, to: usize, noise: &mut NoiseStream| match config.inner_noise {
        InnerNoise::Fresh => renoise(x0, to, schedule, noise),
        InnerNoise::Ddim => renoise_with(x0, eps, schedule.alpha_bar_at(to)?),
    };

    let mut z = renoise(x0_tilde, start, schedule, noise)?;
    let mut n = start;
    let mut steps = 0;
    let mut losses = Vec::new();
    let mut truncated_by = Truncation::None;
    while n > target {
        let loss = motion_loss(&z, bundle, teacher, c, n)?;
        losses.push(loss);
        let cut = if loss < config.delta2 {
            Some(Truncation::Threshold)
        } else if steps >= config.n_max {
            Some(Truncation::NMax)
        } else {
            None
        };
        let (eps_hat, x0) = guided_prediction(teacher, &z, c, n, config.omega_teacher, config, bundle)?;
        if !x0.is_finite() {
            return Err(EchoError::NonFinite {
                t: n,
                stage: "teacher inner step",
            });
        }
        if let Some(reason) = cut {
            z = move_to(&x0, &eps_hat, target, noise)?;
            truncated_by = reason;
            break;
        }
        z = move_to(&x0, &eps_hat, n - dt, noise)?;
        n -= dt;
        steps += 1;
    }
    let (_, x0) = guided_prediction(teacher, &z, c, target, config.omega_teacher, config, bundle)?;
    if !x0.is_finite() {
        return Err(EchoError::NonFinite {
            t: target,
            stage: "teacher endpoint",
        });
    }
    Ok(TeacherRefinement {
        x0,
        start,
        inner_steps: steps,
        truncated_by,
        inner_losses: losses,
    })
}

/// Intermediate quantities of one student step, handed to observers.
#[derive(Debug)]
pub struct StepOutcome<'a> {
    pub record: &'a StepRecord,
    pub x0_tilde: &'a LatentVideo,
    pub x0_hat: Option<&'a LatentVideo>,
    pub x0_teacher: Option<&'a LatentVideo>,
    pub x0_new: &'a LatentVideo,
}

fn finite(x: &LatentVideo, t: usize, stage: &'static str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(EchoError::NonFinite { t, stage })
    }
}

/// Shared inputs of a sampler run.
pub struct EchoInputs<'a, S: Denoiser + ?Sized, T: Denoiser + ?Sized> {
    pub student: &'a S,
    pub teacher: &'a T,
    pub bundle: &'a ReferenceBundle,
    pub condition: &'a Condition,
    pub grids: &'a Grids,
}

impl<S: Denoiser + ?Sized, T: Denoiser + ?Sized> Clone for EchoInputs<'_, S, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S: Denoiser + ?Sized, T: Denoiser + ?Sized> Copy for EchoInputs<'_, S, T> {}

/// Runs `kind` with `config`, reporting every step to `observer`.
pub fn run_observed<S, T, F>(
    kind: RunKind,
    config: &GuidanceConfig,
    inputs: EchoInputs<'_, S, T>,
    streams: &mut RunStreams,
    mut observer: F,
) -> Result<(LatentVideo, SamplerTrace)>
where
    S: Denoiser + ?Sized,
    T: Denoiser + ?Sized,
    F: FnMut(StepOutcome<'_>),
{
    let config = kind.apply(config);
    config.validate()?;
    let EchoInputs {
        student,
        teacher,
        bundle,
        condition: c,
        grids,
    } = inputs;
    let schedule = student.schedule();
    let total = grids.total_steps();
    if schedule.total_steps() != total {
        return Err(invalid("grids", "grids and schedule disagree on T"));
    }
    let ds = grids.student.stride();
    let gate = config.tau * total as f64;

    let mut z = blend_init(&bundle.z_ref_t, config.k, &mut streams.init)?;
    finite(&z, total, "initialization")?;
    let mut history = LossHistory::new(config.window);
    let mut records = Vec::with_capacity(grids.student.len());
    let mut final_latent = None;

    for &t in grids.student.steps() {
        let s0 = student.counters().snapshot();
        let t0 = teacher.counters().snapshot();

        // Stage 1: student endpoints
        let eps_tilde = cfg_epsilon(student, &z, c, t, config.omega_student)?;
        let x0_tilde = one_step_x0(&z, &eps_tilde, t, schedule)?;
        finite(&x0_tilde, t, "student prediction")?;
        let loss = motion_loss(&z, bundle, student, c, t)?;
        history.push(loss);

        let mut x0_hat = None;
        let mut refinement = None;
        let mut window_avg = None;
        let stage;
        let x0_new;
        if t as f64 > gate {
            let (_, hat) = guided_prediction(student, &z, c, t, config.omega_student, &config, bundle)?;
            finite(&hat, t, "motion-guided student prediction")?;
            window_avg = history.mean();
            // Stage 2: adaptive teacher guidance
            if t > ds && should_activate(&history, config.delta1) {
                let r = teacher_refine(&x0_tilde, t, &config, teacher, bundle, c, grids, &mut streams.teacher)?;
                x0_new = interpolate_x0(&hat, &r.x0, config.lambda)?;
                stage = Stage::TeacherGuided;
                refinement = Some(r);
            } else {
                x0_new = hat.clone();
                stage = Stage::MotionOnly;
            }
            x0_hat = Some(hat);
        } else {
            x0_new = x0_tilde.clone();
            stage = Stage::NoGuidance;
        }
        finite(&x0_new, t, "endpoint update")?;

        let s1 = student.counters().snapshot().since(s0);
        let t1 = teacher.counters().snapshot().since(t0);
        let record = StepRecord {
            t,
            motion_loss: loss,
            window_avg,
            stage,
            inner_start: refinement.as_ref().map(|r| r.start),
            inner_steps: refinement.as_ref().map_or(0, |r| r.inner_steps),
            inner_losses: refinement.as_ref().map_or_else(Vec::new, |r| r.inner_losses.clone()),
            truncated_by: refinement.as_ref().map_or(Truncation::None, |r| r.truncated_by),
            student_nfe: s1.eps,
            teacher_nfe: t1.eps,
            gradient_evals: s1.grads + t1.grads,
        };
        observer(StepOutcome {
            record: &record,
            x0_tilde: &x0_tilde,
            x0_hat: x0_hat.as_ref(),
            x0_teacher: refinement.as_ref().map(|r| &r.x0),
            x0_new: &x0_new,
        });
        records.push(record);

        // Stage 3: move to the next student timestep
        let next = t - ds;
        if next == 0 {
            final_latent = Some(x0_new);
        } else {
            z = renoise(&x0_new, next, schedule, &mut streams.student)?;
            finite(&z, next, "renoise")?;
        }
    }

    let final_latent = final_latent.expect("student grid ends at its stride");
    let trace = SamplerTrace {
        kind,
        config,
        total_steps: total,
        student_steps: grids.student.len(),
        teacher_steps: grids.teacher.len(),
        seeds: streams.seeds(),
        records,
        final_latent: final_latent.clone(),
    };
    Ok((final_latent, trace))
}

/// Adaptive run: motion-guided student steps, with teacher refinement
/// when the windowed loss stays above `delta1`.
pub fn run_echo<S, T>(
    config: &GuidanceConfig,
    inputs: EchoInputs<'_, S, T>,
    streams: &mut RunStreams,
) -> Result<(LatentVideo, SamplerTrace)>
where
    S: Denoiser + ?Sized,
    T: Denoiser + ?Sized,
{
    run_observed(RunKind::Echo, config, inputs, streams, |_| {})
}

/// Baselines: plain CFG student, motion-guided student, and teacher guidance
/// at every gated step.
pub fn run_baseline<S, T>(
    kind: RunKind,
    config: &GuidanceConfig,
    inputs: EchoInputs<'_, S, T>,
    streams: &mut RunStreams,
) -> Result<(LatentVideo, SamplerTrace)>
where
    S: Denoiser + ?Sized,
    T: Denoiser + ?Sized,
{
    run_observed(kind, config, inputs, streams, |_| {})
}
