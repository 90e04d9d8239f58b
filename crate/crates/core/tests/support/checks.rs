//! Sampler-level checks shared by the core tests and the acceptance target.
//! Each returns a one-line summary on success and the first violation on
//! failure.

use echo_core::{Condition, Denoiser, GuidanceConfig, LatentVideo, NoiseStream, RunKind, Stage, Truncation, World};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_trace, comb, mirror, scenarios, small_world};

pub type Check = Result<String, String>;

pub fn max_abs_diff(a: &LatentVideo, b: &LatentVideo) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Library sampler against the straight-line mirror on every scenario,
/// bitwise when deterministic and to 1e-10 with shared streams otherwise.
pub fn mirror_equivalence() -> Check {
    let mut worst: f64 = 0.0;
    for (i, (world, cfg)) in scenarios().iter().enumerate() {
        let bundle = world.bundle(cfg, None).map_err(|e| e.to_string())?;
        for deterministic in [true, false] {
            let seed = 100 + i as u64;
            let (x, trace) = world
                .run(RunKind::Echo, cfg, &bundle, seed, deterministic)
                .map_err(|e| e.to_string())?;
            let (y, steps) = mirror(world, cfg, &bundle, seed, deterministic);
            let got: Vec<_> = trace
                .records
                .iter()
                .map(|r| (r.t, r.stage, r.inner_steps, r.truncated_by))
                .collect();
            let want: Vec<_> = steps
                .iter()
                .map(|s| (s.t, s.stage, s.inner_steps, s.truncated_by))
                .collect();
            if got != want {
                return Err(format!(
                    "scenario {i} (deterministic {deterministic}): step labels differ"
                ));
            }
            let d = max_abs_diff(&x, &y);
            if deterministic && x != y {
                return Err(format!("scenario {i}: deterministic outputs differ by {d:e}"));
            }
            if d > 1e-10 {
                return Err(format!("scenario {i}: stochastic outputs differ by {d:e}"));
            }
            worst = worst.max(d);
        }
    }
    Ok(format!(
        "5 scenarios, deterministic bitwise, stochastic max |diff| {worst:e}"
    ))
}

/// CFG-only student sampling, written without the sampler.
pub fn plain_student(world: &World, cfg: &GuidanceConfig, z_ref_t: &LatentVideo, seed: u64) -> LatentVideo {
    let student = world.student().unwrap();
    let ab = world.schedule.alpha_bars();
    let (f, d) = (world.spec.frames, world.spec.dim);
    let mut init = NoiseStream::seeded(seed, echo_core::rng::INIT_STREAM);
    let mut noise = NoiseStream::seeded(seed, echo_core::rng::STUDENT_STREAM);
    let mut z = comb(cfg.k.sqrt(), z_ref_t, (1.0 - cfg.k).sqrt(), &init.standard_normal(f, d));
    for &t in world.grids.student.steps() {
        let on = student.epsilon(&z, world.condition(), t).unwrap();
        let off = student.epsilon(&z, &Condition::Unconditional, t).unwrap();
        let e = comb(1.0 + cfg.omega_student, &on, -cfg.omega_student, &off);
        let x0 = comb(1.0 / ab[t].sqrt(), &z, -(1.0 - ab[t]).sqrt() / ab[t].sqrt(), &e);
        let next = t - world.grids.student.stride();
        if next == 0 {
            return x0;
        }
        z = comb(
            ab[next].sqrt(),
            &x0,
            (1.0 - ab[next]).sqrt(),
            &noise.standard_normal(f, d),
        );
    }
    unreachable!()
}

fn run(
    world: &World,
    kind: RunKind,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<(LatentVideo, echo_core::SamplerTrace), String> {
    let bundle = world.bundle(cfg, None).map_err(|e| e.to_string())?;
    world.run(kind, cfg, &bundle, seed, false).map_err(|e| e.to_string())
}

pub fn full_gating_is_plain_student() -> Check {
    for (i, (world, cfg)) in scenarios().into_iter().enumerate() {
        let (x, trace) = run(
            &world,
            RunKind::Echo,
            &GuidanceConfig {
                tau: 1.0,
                ..cfg.clone()
            },
            9,
        )?;
        let (y, _) = run(&world, RunKind::StudentPlain, &cfg, 9)?;
        if x != y || trace.records.iter().any(|r| r.stage != Stage::NoGuidance) {
            return Err(format!("scenario {i}: tau = 1 differs from student_plain"));
        }
        let bundle = world.bundle(&cfg, None).unwrap();
        // separate arithmetic order, so compare to rounding
        let d = max_abs_diff(&x, &plain_student(&world, &cfg, &bundle.z_ref_t, 9));
        if d >= 1e-9 {
            return Err(format!("scenario {i}: independent plain sampler differs by {d:e}"));
        }
    }
    Ok("tau = 1 is student_plain".into())
}

pub fn infinite_delta1_is_student_motion() -> Check {
    for (i, (world, cfg)) in scenarios().into_iter().enumerate() {
        let never = GuidanceConfig {
            delta1: f64::INFINITY,
            ..cfg.clone()
        };
        let (x, trace) = run(&world, RunKind::Echo, &never, 4)?;
        let (y, _) = run(&world, RunKind::StudentMotion, &cfg, 4)?;
        if x != y
            || trace
                .records
                .iter()
                .any(|r| r.stage == Stage::TeacherGuided || r.teacher_nfe > 0)
        {
            return Err(format!("scenario {i}: delta1 = inf differs from student_motion"));
        }
    }
    Ok("delta1 = inf is student_motion".into())
}

pub fn zero_lambda_ignores_the_teacher() -> Check {
    for (i, (world, cfg)) in scenarios().into_iter().enumerate() {
        let forced = GuidanceConfig {
            lambda: 0.0,
            delta1: f64::NEG_INFINITY,
            ..cfg.clone()
        };
        let (x, trace) = run(&world, RunKind::Echo, &forced, 6)?;
        let (y, _) = run(&world, RunKind::StudentMotion, &cfg, 6)?;
        if !trace.records.iter().any(|r| r.stage == Stage::TeacherGuided) {
            return Err(format!("scenario {i}: the teacher never ran"));
        }
        if x != y {
            return Err(format!("scenario {i}: lambda = 0 differs from student_motion"));
        }
    }
    Ok("lambda = 0 is student_motion".into())
}

pub fn unit_lambda_passes_teacher_endpoints_through() -> Check {
    for (i, (world, cfg)) in scenarios().into_iter().enumerate() {
        let bundle = world.bundle(&cfg, None).map_err(|e| e.to_string())?;
        let full = GuidanceConfig {
            lambda: 1.0,
            n_max: 10_000,
            delta2: 0.0,
            delta1: f64::NEG_INFINITY,
            ..cfg.clone()
        };
        let mut checked = 0;
        let mut bad = None;
        world
            .run_observed(RunKind::Echo, &full, &bundle, 2, false, |o| {
                if let Some(teacher) = o.x0_teacher {
                    if o.x0_new != teacher || o.record.truncated_by != Truncation::None {
                        bad.get_or_insert(o.record.t);
                    }
                    checked += 1;
                }
            })
            .map_err(|e| e.to_string())?;
        if let Some(t) = bad {
            return Err(format!("scenario {i}: teacher endpoint mixed at t={t}"));
        }
        if checked == 0 {
            return Err(format!("scenario {i}: no teacher step"));
        }
    }
    Ok("lambda = 1 passes the teacher endpoint through".into())
}

pub fn degeneracies() -> Check {
    let parts = [
        full_gating_is_plain_student()?,
        infinite_delta1_is_student_motion()?,
        zero_lambda_ignores_the_teacher()?,
        unit_lambda_passes_teacher_endpoints_through()?,
    ];
    Ok(parts.join("; "))
}

fn fuzz_config(rng: &mut ChaCha8Rng) -> GuidanceConfig {
    let pick = |rng: &mut ChaCha8Rng, xs: &[f64]| xs[rng.random_range(0..xs.len())];
    GuidanceConfig {
        eta: pick(rng, &[0.0, 1.0, 5.0, 20.0]),
        lambda: rng.random_range(0.0..=1.0),
        tau: pick(rng, &[0.0, 0.1, 0.3, 0.5, 0.9, 1.0]),
        k: rng.random_range(0.0..0.2),
        delta1: pick(rng, &[f64::NEG_INFINITY, 0.0, 0.01, 0.05, 0.2, f64::INFINITY]),
        delta2: pick(rng, &[0.0, 0.005, 0.02, 0.1, f64::INFINITY]),
        window: rng.random_range(1..5),
        n_max: rng.random_range(0..6),
        inner_start_fraction: pick(rng, &[0.1, 0.5, 0.9, 1.0]),
        omega_student: pick(rng, &[0.0, 1.0, 3.0]),
        omega_teacher: pick(rng, &[0.0, 1.0]),
        ..GuidanceConfig::default()
    }
}

/// `runs` random configurations over three small worlds, each trace
/// re-derived by `check_trace`.
pub fn truncation_fuzz(runs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let worlds = [
        World::build(&small_world(4, 2, 8, 64, 0.05)).unwrap(),
        World::build(&small_world(6, 3, 4, 128, 0.1)).unwrap(),
        World::build(&small_world(5, 2, 16, 256, 0.0)).unwrap(),
    ];
    let (mut threshold, mut n_max, mut active) = (0, 0, 0);
    for i in 0..runs {
        let world = &worlds[i % worlds.len()];
        let cfg = fuzz_config(&mut rng);
        let bundle = world.bundle(&cfg, None).map_err(|e| e.to_string())?;
        let (_, trace) = world
            .run(RunKind::Echo, &cfg, &bundle, i as u64, i % 4 == 0)
            .map_err(|e| e.to_string())?;
        check_trace(&trace).map_err(|e| format!("run {i}: {e}"))?;
        let activated = trace.records.iter().filter(|r| r.stage == Stage::TeacherGuided).count();
        let inner: usize = trace.records.iter().map(|r| r.inner_steps).sum();
        if inner > cfg.n_max * activated {
            return Err(format!("run {i}: {inner} inner steps over budget"));
        }
        active += activated;
        threshold += trace
            .records
            .iter()
            .filter(|r| r.truncated_by == Truncation::Threshold)
            .count();
        n_max += trace
            .records
            .iter()
            .filter(|r| r.truncated_by == Truncation::NMax)
            .count();
    }
    Ok(format!(
        "{runs} runs, {active} teacher steps ({threshold} threshold, {n_max} n_max truncations)"
    ))
}
