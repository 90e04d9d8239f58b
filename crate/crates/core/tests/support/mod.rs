//! Test-side oracles shared by the integration tests (and the CLI acceptance
//! target): a straight-line re-implementation of the adaptive sampler, an
//! independent stage checker, and a handful of small worlds.
#![allow(dead_code)]

pub mod checks;
pub mod oracles;

use echo_core::motion::{motion_loss, motion_loss_grad};
use echo_core::rng::{INIT_STREAM, STUDENT_STREAM, TEACHER_STREAM};
use echo_core::world::{ComponentSpec, ScheduleSpec};
use echo_core::{
    Condition, Denoiser, GuidanceConfig, InnerNoise, LatentVideo, MotionSpec, NoiseStream, ReferenceBundle,
    SamplerTrace, Stage, StudentPerturbation, Truncation, World, WorldSpec,
};

#[derive(Clone, Debug, PartialEq)]
pub struct MirrorStep {
    pub t: usize,
    pub loss: f64,
    pub stage: Stage,
    pub inner_steps: usize,
    pub truncated_by: Truncation,
}

pub fn comb(a: f64, x: &LatentVideo, b: f64, y: &LatentVideo) -> LatentVideo {
    let v = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(p, q)| a * p + b * q)
        .collect();
    LatentVideo::from_vec(x.frames(), x.dim(), v).unwrap()
}

/// The adaptive sampler written out as one function, from model evaluations up.
/// Only the Bayes denoisers, the loss and its gradient come from the library.
pub fn mirror(
    world: &World,
    cfg: &GuidanceConfig,
    bundle: &ReferenceBundle,
    seed: u64,
    deterministic: bool,
) -> (LatentVideo, Vec<MirrorStep>) {
    let student = world.student().unwrap();
    let teacher = world.teacher();
    let c = world.condition().clone();
    let ab = world.schedule.alpha_bars().to_vec();
    let big_t = world.schedule.total_steps();
    let ds = big_t / world.spec.schedule.student_steps;
    let dt = big_t / world.spec.schedule.teacher_steps;
    let stream = |s| {
        if deterministic {
            NoiseStream::zero()
        } else {
            NoiseStream::seeded(seed, s)
        }
    };
    let (mut init_noise, mut student_noise, mut teacher_noise) =
        (stream(INIT_STREAM), stream(STUDENT_STREAM), stream(TEACHER_STREAM));
    let (f, d) = (world.spec.frames, world.spec.dim);

    let cfg_eps = |m: &dyn Denoiser, z: &LatentVideo, t: usize, w: f64| {
        let on = m.epsilon(z, &c, t).unwrap();
        let off = m.epsilon(z, &Condition::Unconditional, t).unwrap();
        comb(1.0 + w, &on, -w, &off)
    };
    let x0_of = |z: &LatentVideo, e: &LatentVideo, t: usize| {
        let (a, b) = (ab[t].sqrt(), (1.0 - ab[t]).sqrt());
        let v = z
            .as_slice()
            .iter()
            .zip(e.as_slice())
            .map(|(zi, ei)| (zi - b * ei) / a)
            .collect();
        LatentVideo::from_vec(z.frames(), z.dim(), v).unwrap()
    };
    let guided = |m: &dyn Denoiser, z: &LatentVideo, t: usize, w: f64| {
        let e = cfg_eps(m, z, t, w);
        let g = motion_loss_grad(z, bundle, m, &c, t, cfg.gradient).unwrap();
        let e = comb(1.0, &e, cfg.eta, &g);
        let x0 = x0_of(z, &e, t);
        (e, x0)
    };
    let noised = |x0: &LatentVideo, e: &LatentVideo, t: usize| comb(ab[t].sqrt(), x0, (1.0 - ab[t]).sqrt(), e);

    let mut z = comb(
        cfg.k.sqrt(),
        &bundle.z_ref_t,
        (1.0 - cfg.k).sqrt(),
        &init_noise.standard_normal(f, d),
    );
    let mut window: Vec<f64> = Vec::new();
    let mut steps = Vec::new();
    let mut t = big_t;
    loop {
        let e = cfg_eps(&student, &z, t, cfg.omega_student);
        let x0_tilde = x0_of(&z, &e, t);
        let loss = motion_loss(&z, bundle, &student, &c, t).unwrap();
        window.push(loss);
        if window.len() > cfg.window {
            window.remove(0);
        }
        let mut stage = Stage::NoGuidance;
        let mut inner = 0;
        let mut cut = Truncation::None;
        let x0_new = if t as f64 > cfg.tau * big_t as f64 {
            let (_, x0_hat) = guided(&student, &z, t, cfg.omega_student);
            let avg = window.iter().sum::<f64>() / window.len() as f64;
            if t > ds && avg > cfg.delta1 {
                stage = Stage::TeacherGuided;
                let target = t - ds;
                let raw = (t as f64 - cfg.inner_start_fraction * ds as f64).floor() as usize;
                let start = ((raw / dt) * dt).clamp(target + dt, t);
                let mut zt = noised(&x0_tilde, &teacher_noise.standard_normal(f, d), start);
                let mut n = start;
                while n > target {
                    let l = motion_loss(&zt, bundle, &teacher, &c, n).unwrap();
                    let (eh, x0) = guided(&teacher, &zt, n, cfg.omega_teacher);
                    let stop = if l < cfg.delta2 {
                        Some(Truncation::Threshold)
                    } else if inner >= cfg.n_max {
                        Some(Truncation::NMax)
                    } else {
                        None
                    };
                    let to = if stop.is_some() { target } else { n - dt };
                    zt = match cfg.inner_noise {
                        InnerNoise::Fresh => noised(&x0, &teacher_noise.standard_normal(f, d), to),
                        InnerNoise::Ddim => noised(&x0, &eh, to),
                    };
                    if let Some(s) = stop {
                        cut = s;
                        break;
                    }
                    n -= dt;
                    inner += 1;
                }
                let (_, x0_teacher) = guided(&teacher, &zt, target, cfg.omega_teacher);
                comb(1.0 - cfg.lambda, &x0_hat, cfg.lambda, &x0_teacher)
            } else {
                stage = Stage::MotionOnly;
                x0_hat
            }
        } else {
            x0_tilde
        };
        steps.push(MirrorStep {
            t,
            loss,
            stage,
            inner_steps: inner,
            truncated_by: cut,
        });
        if t == ds {
            return (x0_new, steps);
        }
        t -= ds;
        z = noised(&x0_new, &student_noise.standard_normal(f, d), t);
    }
}

/// Re-derives every stage label and truncation cause from the recorded
/// losses and the trace's own configuration.
pub fn check_trace(trace: &SamplerTrace) -> Result<(), String> {
    let cfg = &trace.config;
    let ds = trace.total_steps / trace.student_steps;
    if trace.records.len() != trace.student_steps {
        return Err(format!(
            "{} records for {} steps",
            trace.records.len(),
            trace.student_steps
        ));
    }
    let mut recent: Vec<f64> = Vec::new();
    for (i, r) in trace.records.iter().enumerate() {
        let t_expected = trace.total_steps - i * ds;
        if r.t != t_expected {
            return Err(format!("record {i} at t={} instead of {t_expected}", r.t));
        }
        recent.push(r.motion_loss);
        let from = recent.len().saturating_sub(cfg.window);
        let avg = recent[from..].iter().sum::<f64>() / (recent.len() - from) as f64;
        let gated = r.t as f64 > cfg.tau * trace.total_steps as f64;
        let expected = if !gated {
            Stage::NoGuidance
        } else if r.t > ds && avg > cfg.delta1 {
            Stage::TeacherGuided
        } else {
            Stage::MotionOnly
        };
        if r.stage != expected {
            return Err(format!("t={}: stage {:?}, expected {expected:?}", r.t, r.stage));
        }
        if !gated && (r.teacher_nfe != 0 || r.inner_steps != 0) {
            return Err(format!("t={}: teacher activity below the gate", r.t));
        }
        if r.inner_steps > cfg.n_max {
            return Err(format!(
                "t={}: {} inner steps over n_max {}",
                r.t, r.inner_steps, cfg.n_max
            ));
        }
        if r.stage != Stage::TeacherGuided {
            if r.inner_steps != 0 || r.truncated_by != Truncation::None || r.teacher_nfe != 0 {
                return Err(format!("t={}: teacher fields set without activation", r.t));
            }
            continue;
        }
        // one checked loss per inner iteration plus the truncating check
        let losses = &r.inner_losses;
        let checks = r.inner_steps + usize::from(r.truncated_by != Truncation::None);
        if losses.len() != checks {
            return Err(format!("t={}: {} inner losses for {checks} checks", r.t, losses.len()));
        }
        if losses[..r.inner_steps].iter().any(|&l| l < cfg.delta2) {
            return Err(format!("t={}: continued past a loss below delta2", r.t));
        }
        let cause = match losses.get(r.inner_steps) {
            None => Truncation::None,
            Some(&l) if l < cfg.delta2 => Truncation::Threshold,
            Some(_) if r.inner_steps >= cfg.n_max => Truncation::NMax,
            Some(_) => return Err(format!("t={}: stopped without a cause", r.t)),
        };
        if cause != r.truncated_by {
            return Err(format!(
                "t={}: truncated_by {:?}, expected {cause:?}",
                r.t, r.truncated_by
            ));
        }
    }
    Ok(())
}

/// Small world: two class-"a" modes (one drifting) and a class-"b" distractor.
pub fn small_world(frames: usize, dim: usize, student_steps: usize, teacher_steps: usize, amp: f64) -> WorldSpec {
    let base: Vec<f64> = (0..dim).map(|j| if j == 0 { 1.5 } else { 0.0 }).collect();
    let drift: Vec<f64> = (0..dim).map(|j| if j == 0 { 0.0 } else { 0.25 / j as f64 }).collect();
    let moving = (0..frames)
        .map(|i| base.iter().zip(&drift).map(|(b, d)| b + i as f64 * d).collect())
        .collect();
    WorldSpec {
        frames,
        dim,
        schedule: ScheduleSpec {
            total_steps: 256,
            beta_start: 1e-4,
            beta_end: 0.03,
            student_steps,
            teacher_steps,
            inversion_steps: None,
        },
        components: vec![
            ComponentSpec {
                weight: 0.4,
                variance: 0.05,
                mean: moving,
                class: Some("a".into()),
            },
            ComponentSpec {
                weight: 0.3,
                variance: 0.05,
                mean: vec![base.clone()],
                class: Some("a".into()),
            },
            ComponentSpec {
                weight: 0.3,
                variance: 0.1,
                mean: vec![base.iter().map(|b| -b).collect()],
                class: Some("b".into()),
            },
        ],
        condition: Condition::class("a"),
        reference_condition: Condition::class("a"),
        motion: MotionSpec {
            drift,
            ar: 1.0,
            noise_scale: 0.05,
        },
        reference_seed: 11,
        student: StudentPerturbation {
            bias_amplitude: amp,
            bias_seed: 5,
        },
    }
}

/// Five fixed scenarios covering activation, both truncation causes, the
/// DDIM inner loop and CFG.
pub fn scenarios() -> Vec<(World, GuidanceConfig)> {
    let base = GuidanceConfig {
        eta: 5.0,
        tau: 0.2,
        window: 2,
        ..GuidanceConfig::default()
    };
    let cases = [
        (
            small_world(6, 3, 8, 64, 0.05),
            GuidanceConfig {
                delta1: 0.05,
                delta2: 0.02,
                ..base.clone()
            },
        ),
        (
            small_world(4, 2, 8, 32, 0.1),
            GuidanceConfig {
                delta1: f64::NEG_INFINITY,
                delta2: 0.0,
                n_max: 1,
                ..base.clone()
            },
        ),
        (
            small_world(5, 4, 4, 64, 0.02),
            GuidanceConfig {
                delta1: 0.0,
                delta2: 1e9,
                inner_start_fraction: 1.0,
                ..base.clone()
            },
        ),
        (
            small_world(8, 2, 8, 128, 0.05),
            GuidanceConfig {
                inner_noise: InnerNoise::Ddim,
                delta1: 0.01,
                delta2: 0.005,
                window: 3,
                ..base.clone()
            },
        ),
        (
            small_world(6, 3, 16, 64, 0.2),
            GuidanceConfig {
                omega_student: 2.0,
                omega_teacher: 1.5,
                lambda: 0.7,
                delta1: 0.02,
                delta2: 0.01,
                ..base
            },
        ),
    ];
    cases
        .into_iter()
        .map(|(spec, cfg)| (World::build(&spec).unwrap(), cfg))
        .collect()
}
