//! Independent numerical oracles: closed-form densities, finite differences,
//! Monte Carlo moments and the inversion round trip.

use std::collections::BTreeMap;
use std::sync::Arc;

use echo_core::motion::{derive_mask, motion_loss, motion_loss_grad, temporal_attention};
use echo_core::rng::{chacha, REFERENCE_STREAM};
use echo_core::{
    ddim_invert, ddim_sample, exact_epsilon, make_grid, make_linear_schedule, renoise, sample_reference, Condition,
    FeatureKind, GradientMode, LatentVideo, MixtureComponent, MixtureModel, NoiseStream, ReferenceBundle, TeacherModel,
    World, WorldSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_video(rng: &mut ChaCha8Rng, f: usize, d: usize, scale: f64) -> LatentVideo {
    LatentVideo::from_fn(f, d, |_, _| {
        let n: f64 = StandardNormal.sample(rng);
        scale * n
    })
}

/// 1 to 4 components with random means and variances; class "x" is the
/// first component, class "y" the odd ones.
pub fn random_mixture(rng: &mut ChaCha8Rng, f: usize, d: usize) -> MixtureModel {
    let k = rng.random_range(1..5);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut components: Vec<MixtureComponent> = raw
        .iter()
        .map(|w| MixtureComponent {
            weight: w / total,
            mean: normal_video(rng, f, d, 1.5),
            variance: rng.random_range(0.05..2.0),
        })
        .collect();
    let s: f64 = components.iter().map(|c| c.weight).sum();
    components.last_mut().unwrap().weight += 1.0 - s;
    let mut classes = BTreeMap::new();
    classes.insert("x".to_string(), vec![0]);
    classes.insert("y".to_string(), (0..k).filter(|i| i % 2 == 1 || k == 1).collect());
    MixtureModel::new(components, classes).unwrap()
}

/// Direct transcription of the noised mixture density.
fn log_p(m: &MixtureModel, ab: f64, z: &[f64], subset: &[usize]) -> f64 {
    let wsum: f64 = subset.iter().map(|&k| m.components()[k].weight).sum();
    let n = z.len() as f64;
    let mut total = 0.0;
    for &k in subset {
        let c = &m.components()[k];
        let var = ab * c.variance + 1.0 - ab;
        let sq: f64 = z
            .iter()
            .zip(c.mean.as_slice())
            .map(|(x, mu)| (x - ab.sqrt() * mu).powi(2))
            .sum();
        total += c.weight / wsum * (-0.5 * sq / var).exp() / (2.0 * std::f64::consts::PI * var).powf(n / 2.0);
    }
    total.ln()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Worst relative error of `exact_epsilon` against
/// `-sqrt(1 - ab) * grad log p_t` by Richardson-extrapolated central
/// differences, over `cases` random (mixture, z, c, t).
pub fn score_fd_worst(cases: usize, seed: u64) -> f64 {
    let schedule = make_linear_schedule(500, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (f, d) = (rng.random_range(1..4), rng.random_range(1..4));
        let m = random_mixture(&mut rng, f, d);
        let t = rng.random_range(1..=500);
        let ab = schedule.alpha_bars()[t];
        let (c, subset): (Condition, Vec<usize>) = match case % 3 {
            0 => (Condition::Unconditional, (0..m.components().len()).collect()),
            1 => (Condition::class("x"), m.classes()["x"].clone()),
            _ => (Condition::class("y"), m.classes()["y"].clone()),
        };
        // near a mode but off it, so responsibilities are mixed
        let z = normal_video(&mut rng, f, d, 0.7)
            .lin_comb(1.0, &m.components()[subset[0]].mean, 0.5 * ab.sqrt())
            .unwrap();
        let eps = exact_epsilon(&m, &schedule, &z, &c, t).unwrap();
        let fd = |h: f64, i: usize| {
            let mut up = z.as_slice().to_vec();
            let mut down = up.clone();
            up[i] += h;
            down[i] -= h;
            (log_p(&m, ab, &up, &subset) - log_p(&m, ab, &down, &subset)) / (2.0 * h)
        };
        let oracle: Vec<f64> = (0..z.len())
            .map(|i| -(1.0 - ab).sqrt() * (4.0 * fd(5e-4, i) - fd(1e-3, i)) / 3.0)
            .collect();
        worst = worst.max(rel_err(eps.as_slice(), &oracle));
    }
    worst
}

fn random_bundle(rng: &mut ChaCha8Rng, f: usize, d: usize, feature: FeatureKind) -> ReferenceBundle {
    let reference = LatentVideo::from_fn(f, d, |i, j| i as f64 * 0.4 / (j as f64 + 1.0))
        .lin_comb(1.0, &normal_video(rng, f, d, 0.5), 1.0)
        .unwrap();
    let a_ref = temporal_attention(&reference);
    let mask = derive_mask(&a_ref, rng.random_range(0.3..1.0)).unwrap();
    ReferenceBundle {
        z_ref_t: reference.clone(),
        z_ref_talpha: reference,
        a_ref,
        mask,
        t_alpha: 1,
        feature,
    }
}

/// Worst relative error of the analytic motion-loss gradient against
/// central differences with `h = 1e-5`, F in [2, 6], D in [1, 4]. At flat
/// spots (difference norm below 1e-7) the absolute error is scaled by 1e5.
pub fn motion_grad_fd_worst(cases: usize, seed: u64) -> f64 {
    let schedule = Arc::new(make_linear_schedule(200, 1e-4, 0.02).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (f, d) = (rng.random_range(2..=6), rng.random_range(1..=4));
        let m = Arc::new(random_mixture(&mut rng, f, d));
        let feature = if case % 4 == 0 {
            FeatureKind::NoisyLatent
        } else {
            FeatureKind::CleanPrediction
        };
        let bundle = random_bundle(&mut rng, f, d, feature);
        let teacher = TeacherModel::new(m, schedule.clone());
        let c = if case % 2 == 0 {
            Condition::class("x")
        } else {
            Condition::Unconditional
        };
        let t = rng.random_range(20..=200);
        let z = normal_video(&mut rng, f, d, 1.0);
        let g = motion_loss_grad(&z, &bundle, &teacher, &c, t, GradientMode::Analytic).unwrap();
        let fd: Vec<f64> = (0..z.len())
            .map(|i| {
                let mut up = z.clone();
                let mut down = z.clone();
                up.as_mut_slice()[i] += h;
                down.as_mut_slice()[i] -= h;
                let lu = motion_loss(&up, &bundle, &teacher, &c, t).unwrap();
                let ld = motion_loss(&down, &bundle, &teacher, &c, t).unwrap();
                (lu - ld) / (2.0 * h)
            })
            .collect();
        let scale = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        let e = rel_err(g.as_slice(), &fd);
        worst = worst.max(if scale < 1e-7 { e * scale.max(1e-12) * 1e5 } else { e });
    }
    worst
}

/// Largest |mean error| in standard errors and largest relative variance
/// error over the coordinates of `n` renoised draws.
pub fn renoise_moments(n: usize, seed: u64) -> (f64, f64) {
    let schedule = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
    let t = 300;
    let ab = schedule.alpha_bars()[t];
    let x0 = LatentVideo::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
    let mut noise = NoiseStream::seeded(seed, 1);
    let draws: Vec<LatentVideo> = (0..n)
        .map(|_| renoise(&x0, t, &schedule, &mut noise).unwrap())
        .collect();
    let (mut z_worst, mut v_worst): (f64, f64) = (0.0, 0.0);
    for i in 0..x0.len() {
        let xs: Vec<f64> = draws.iter().map(|z| z.as_slice()[i]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        z_worst = z_worst.max((mean - ab.sqrt() * x0.as_slice()[i]).abs() / se);
        v_worst = v_worst.max((var / (1.0 - ab) - 1.0).abs());
    }
    (z_worst, v_worst)
}

/// The benchmark mixture on a T = 1000 schedule, so that 10, 50 and 200
/// step grids all divide it.
pub fn inversion_world() -> World {
    let mut spec = WorldSpec::benchmark();
    spec.schedule.total_steps = 1000;
    spec.schedule.student_steps = 10;
    spec.schedule.teacher_steps = 200;
    World::build(&spec).unwrap()
}

/// Relative L2 error of invert-then-sample on an `steps`-step grid for a
/// reference-like clean latent drawn with `seed`.
pub fn round_trip_error(world: &World, steps: usize, seed: u64) -> f64 {
    let teacher = world.teacher();
    let c = world.condition();
    let (f, d) = (world.spec.frames, world.spec.dim);
    let mut rng = chacha(seed, REFERENCE_STREAM);
    let z0 = sample_reference(&world.mixture, c, &world.spec.motion, f, d, &mut rng).unwrap();
    let grid = make_grid(world.schedule.total_steps(), steps).unwrap();
    let (z_t, _) = ddim_invert(&teacher, &z0, c, &grid, grid.stride()).unwrap();
    let back = ddim_sample(&teacher, &z_t, c, &grid).unwrap();
    back.sub(&z0).unwrap().norm() / z0.norm()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median round-trip errors over 20 seeds on 10, 50 and 200 step grids.
pub fn round_trip_medians() -> [f64; 3] {
    let world = inversion_world();
    [10, 50, 200].map(|n| median((0..20).map(|s| round_trip_error(&world, n, s)).collect()))
}
