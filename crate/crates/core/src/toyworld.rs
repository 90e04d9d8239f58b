//! Analytic toy worlds: isotropic Gaussian mixtures over latent videos, with
//! the Bayes-optimal noise predictor as teacher and a coarse-grid, biased
//! copy of it as the distilled student.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, EchoError, Result};
use crate::latent::LatentVideo;
use crate::rng::chacha;
use crate::schedule::{NoiseSchedule, TimestepGrid};

/// Conditioning label. `Unconditional` is the null prompt and selects every
/// mixture component.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Condition {
    Class(String),
    Unconditional,
}

impl From<String> for Condition {
    fn from(s: String) -> Self {
        match s.as_str() {
            "" | "null" | "uncond" => Condition::Unconditional,
            _ => Condition::Class(s),
        }
    }
}

impl From<Condition> for String {
    fn from(c: Condition) -> Self {
        match c {
            Condition::Class(s) => s,
            Condition::Unconditional => "null".to_string(),
        }
    }
}

impl Condition {
    pub fn class(name: &str) -> Self {
        Condition::from(name.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: LatentVideo,
    /// Isotropic per-coordinate variance.
    pub variance: f64,
}

/// Weighted isotropic Gaussian mixture with a label -> component-subset map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct MixtureModel {
    components: Vec<MixtureComponent>,
    classes: BTreeMap<String, Vec<usize>>,
    all: Vec<usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawMixture {
    components: Vec<MixtureComponent>,
    classes: BTreeMap<String, Vec<usize>>,
}

impl TryFrom<RawMixture> for MixtureModel {
    type Error = EchoError;

    fn try_from(raw: RawMixture) -> Result<Self> {
        MixtureModel::new(raw.components, raw.classes)
    }
}

impl From<MixtureModel> for RawMixture {
    fn from(m: MixtureModel) -> Self {
        RawMixture {
            components: m.components,
            classes: m.classes,
        }
    }
}

impl MixtureModel {
    pub fn new(components: Vec<MixtureComponent>, classes: BTreeMap<String, Vec<usize>>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| invalid("components", "mixture needs at least one component"))?;
        let shape = first.mean.shape();
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.shape() != shape {
                return Err(EchoError::ShapeMismatch {
                    expected: shape,
                    actual: c.mean.shape(),
                });
            }
            if !(c.weight >= 0.0) {
                return Err(invalid("weight", format!("component {i} has weight {}", c.weight)));
            }
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return Err(invalid(
                    "variance",
                    format!("component {i} has variance {}", c.variance),
                ));
            }
            if !c.mean.is_finite() {
                return Err(invalid("mean", format!("component {i} has a non-finite mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("weight", format!("weights sum to {total}, not 1")));
        }
        for (label, subset) in &classes {
            if subset.is_empty() {
                return Err(invalid("classes", format!("label `{label}` selects no components")));
            }
            if let Some(&k) = subset.iter().find(|&&k| k >= components.len()) {
                return Err(invalid("classes", format!("label `{label}` names component {k}")));
            }
            if subset.iter().all(|&k| components[k].weight == 0.0) {
                return Err(invalid("classes", format!("label `{label}` has zero total weight")));
            }
        }
        let all = (0..components.len()).collect();
        Ok(Self {
            components,
            classes,
            all,
        })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn classes(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.classes
    }

    pub fn shape(&self) -> (usize, usize) {
        self.components[0].mean.shape()
    }

    /// Components selected by a condition.
    pub fn subset(&self, c: &Condition) -> Result<&[usize]> {
        match c {
            Condition::Unconditional => Ok(&self.all),
            Condition::Class(label) => self
                .classes
                .get(label)
                .map(Vec::as_slice)
                .ok_or_else(|| EchoError::UnknownCondition(label.clone())),
        }
    }
}

/// Responsibilities and scaled residuals `(z - sqrt(ab) mu_k) / s_k` of the
/// noised mixture at one point.
struct Posterior {
    resp: Vec<f64>,
    inv_var: Vec<f64>,
    scaled: Vec<Vec<f64>>,
}

fn posterior(mixture: &MixtureModel, alpha_bar: f64, z: &LatentVideo, c: &Condition) -> Result<Posterior> {
    let (frames, dim) = mixture.shape();
    if z.shape() != (frames, dim) {
        return Err(EchoError::ShapeMismatch {
            expected: (frames, dim),
            actual: z.shape(),
        });
    }
    let n = (frames * dim) as f64;
    let sqrt_ab = alpha_bar.sqrt();
    let subset = mixture.subset(c)?;
    let mut logits = Vec::with_capacity(subset.len());
    let mut inv_var = Vec::with_capacity(subset.len());
    let mut scaled = Vec::with_capacity(subset.len());
    for &k in subset {
        let comp = &mixture.components[k];
        let s = alpha_bar * comp.variance + (1.0 - alpha_bar);
        let mut sq = 0.0;
        let u: Vec<f64> = z
            .as_slice()
            .iter()
            .zip(comp.mean.as_slice())
            .map(|(&zi, &mi)| {
                let d = zi - sqrt_ab * mi;
                sq += d * d;
                d / s
            })
            .collect();
        logits.push(comp.weight.ln() - 0.5 * n * s.ln() - 0.5 * sq / s);
        inv_var.push(1.0 / s);
        scaled.push(u);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut resp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let norm: f64 = resp.iter().sum();
    resp.iter_mut().for_each(|r| *r /= norm);
    Ok(Posterior { resp, inv_var, scaled })
}

/// Closed-form `log p_t(z | c)` of the noised mixture, weights renormalized
/// over the condition's subset.
pub fn log_density(
    mixture: &MixtureModel,
    schedule: &NoiseSchedule,
    z: &LatentVideo,
    c: &Condition,
    t: usize,
) -> Result<f64> {
    let ab = schedule.alpha_bar_at(t)?;
    let subset = mixture.subset(c)?;
    let n = z.len() as f64;
    let wsum: f64 = subset.iter().map(|&k| mixture.components[k].weight).sum();
    let terms: Vec<f64> = subset
        .iter()
        .map(|&k| {
            let comp = &mixture.components[k];
            let s = ab * comp.variance + (1.0 - ab);
            let sq: f64 = z
                .as_slice()
                .iter()
                .zip(comp.mean.as_slice())
                .map(|(&zi, &mi)| (zi - ab.sqrt() * mi).powi(2))
                .sum();
            (comp.weight / wsum).ln() - 0.5 * n * (2.0 * std::f64::consts::PI * s).ln() - 0.5 * sq / s
        })
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + terms.iter().map(|x| (x - max).exp()).sum::<f64>().ln())
}

/// Bayes-optimal noise prediction `-sqrt(1 - ab_t) * grad log p_t(z | c)`.
pub fn exact_epsilon(
    mixture: &MixtureModel,
    schedule: &NoiseSchedule,
    z: &LatentVideo,
    c: &Condition,
    t: usize,
) -> Result<LatentVideo> {
    schedule.check_noisy(t)?;
    let ab = schedule.alpha_bar_at(t)?;
    let post = posterior(mixture, ab, z, c)?;
    let coef = (1.0 - ab).sqrt();
    let mut out = vec![0.0; z.len()];
    for (r, u) in post.resp.iter().zip(&post.scaled) {
        for (o, ui) in out.iter_mut().zip(u) {
            *o += r * ui;
        }
    }
    out.iter_mut().for_each(|o| *o *= coef);
    LatentVideo::from_vec(z.frames(), z.dim(), out)
}

/// `J v` for the Jacobian `J = d exact_epsilon / dz`, which is symmetric:
/// `sqrt(1 - ab) [ (sum r_k / s_k) v - sum r_k u_k (u_k . v) + u_bar (u_bar . v) ]`.
pub fn exact_epsilon_vjp(
    mixture: &MixtureModel,
    schedule: &NoiseSchedule,
    z: &LatentVideo,
    c: &Condition,
    t: usize,
    v: &LatentVideo,
) -> Result<LatentVideo> {
    schedule.check_noisy(t)?;
    z.ensure_shape(v)?;
    let ab = schedule.alpha_bar_at(t)?;
    let post = posterior(mixture, ab, z, c)?;
    let v = v.as_slice();
    let n = v.len();
    let mut ubar = vec![0.0; n];
    let mut diag = 0.0;
    let mut out = vec![0.0; n];
    for ((r, u), iv) in post.resp.iter().zip(&post.scaled).zip(&post.inv_var) {
        diag += r * iv;
        let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        for i in 0..n {
            ubar[i] += r * u[i];
            out[i] -= r * u[i] * uv;
        }
    }
    let ubar_v: f64 = ubar.iter().zip(v).map(|(a, b)| a * b).sum();
    let coef = (1.0 - ab).sqrt();
    for i in 0..n {
        out[i] = coef * (out[i] + diag * v[i] + ubar[i] * ubar_v);
    }
    LatentVideo::from_vec(z.frames(), z.dim(), out)
}

/// Denoiser evaluation counters, shared by reference across one run.
#[derive(Debug, Default)]
pub struct EvalCounters {
    eps: AtomicU64,
    grads: AtomicU64,
    losses: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCount {
    /// Noise predictions (the NFE proper).
    pub eps: u64,
    /// Motion-loss gradient evaluations.
    pub grads: u64,
    /// Motion-loss value evaluations.
    pub losses: u64,
}

impl EvalCount {
    pub fn since(self, earlier: EvalCount) -> EvalCount {
        EvalCount {
            eps: self.eps - earlier.eps,
            grads: self.grads - earlier.grads,
            losses: self.losses - earlier.losses,
        }
    }
}

impl EvalCounters {
    pub fn record_eps(&self) {
        self.eps.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_grad(&self) {
        self.grads.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_loss(&self) {
        self.losses.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> EvalCount {
        EvalCount {
            eps: self.eps.load(Ordering::Relaxed),
            grads: self.grads.load(Ordering::Relaxed),
            losses: self.losses.load(Ordering::Relaxed),
        }
    }
}

/// Noise-prediction model. `epsilon` and `epsilon_vjp` are pure and
/// uncounted; `predict_epsilon` is the counted entry point samplers use.
pub trait Denoiser {
    fn schedule(&self) -> &NoiseSchedule;

    fn epsilon(&self, z: &LatentVideo, c: &Condition, t: usize) -> Result<LatentVideo>;

    /// Jacobian-transpose product `(d epsilon / dz)^T v`.
    fn epsilon_vjp(&self, z: &LatentVideo, c: &Condition, t: usize, v: &LatentVideo) -> Result<LatentVideo>;

    fn counters(&self) -> &EvalCounters;

    fn predict_epsilon(&self, z: &LatentVideo, c: &Condition, t: usize) -> Result<LatentVideo> {
        self.counters().record_eps();
        self.epsilon(z, c, t)
    }
}

/// The fine-grained teacher: exact predictor at every `t` in `[1, T]`.
#[derive(Debug)]
pub struct TeacherModel {
    mixture: Arc<MixtureModel>,
    schedule: Arc<NoiseSchedule>,
    counters: EvalCounters,
}

impl TeacherModel {
    pub fn new(mixture: Arc<MixtureModel>, schedule: Arc<NoiseSchedule>) -> Self {
        Self {
            mixture,
            schedule,
            counters: EvalCounters::default(),
        }
    }

    pub fn mixture(&self) -> &MixtureModel {
        &self.mixture
    }
}

impl Denoiser for TeacherModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn epsilon(&self, z: &LatentVideo, c: &Condition, t: usize) -> Result<LatentVideo> {
        exact_epsilon(&self.mixture, &self.schedule, z, c, t)
    }

    fn epsilon_vjp(&self, z: &LatentVideo, c: &Condition, t: usize, v: &LatentVideo) -> Result<LatentVideo> {
        exact_epsilon_vjp(&self.mixture, &self.schedule, z, c, t, v)
    }

    fn counters(&self) -> &EvalCounters {
        &self.counters
    }
}

/// Distillation error of the student: a frozen Gaussian bias field per
/// timestep, scaled by `bias_amplitude`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentPerturbation {
    pub bias_amplitude: f64,
    pub bias_seed: u64,
}

/// Unit bias field at timestep `t`: `frames * dim` standard normals, row
/// major, from ChaCha8 seeded with `seed` on stream `t`.
pub fn bias_field(seed: u64, t: usize, frames: usize, dim: usize) -> LatentVideo {
    let mut rng = chacha(seed, t as u64);
    LatentVideo::from_fn(frames, dim, |_, _| StandardNormal.sample(&mut rng))
}

/// Student prediction: exact predictor restricted to the coarse grid plus the
/// frozen bias field.
#[allow(clippy::too_many_arguments)]
pub fn student_epsilon(
    mixture: &MixtureModel,
    schedule: &NoiseSchedule,
    perturbation: &StudentPerturbation,
    grid: &TimestepGrid,
    z: &LatentVideo,
    c: &Condition,
    t: usize,
) -> Result<LatentVideo> {
    grid.check(t)?;
    let exact = exact_epsilon(mixture, schedule, z, c, t)?;
    if perturbation.bias_amplitude == 0.0 {
        return Ok(exact);
    }
    let bias = bias_field(perturbation.bias_seed, t, z.frames(), z.dim());
    exact.lin_comb(1.0, &bias, perturbation.bias_amplitude)
}

/// The distilled student. Only evaluable on its own coarse grid.
#[derive(Debug)]
pub struct StudentModel {
    mixture: Arc<MixtureModel>,
    schedule: Arc<NoiseSchedule>,
    grid: TimestepGrid,
    perturbation: StudentPerturbation,
    biases: BTreeMap<usize, LatentVideo>,
    counters: EvalCounters,
}

impl StudentModel {
    pub fn new(
        mixture: Arc<MixtureModel>,
        schedule: Arc<NoiseSchedule>,
        grid: TimestepGrid,
        perturbation: StudentPerturbation,
    ) -> Result<Self> {
        if grid.total_steps() != schedule.total_steps() {
            return Err(invalid(
                "student_grid",
                format!(
                    "grid spans {} steps but the schedule has {}",
                    grid.total_steps(),
                    schedule.total_steps()
                ),
            ));
        }
        if !(perturbation.bias_amplitude >= 0.0 && perturbation.bias_amplitude.is_finite()) {
            return Err(invalid("bias_amplitude", "must be finite and nonnegative"));
        }
        let (frames, dim) = mixture.shape();
        let biases = grid
            .steps()
            .iter()
            .map(|&t| (t, bias_field(perturbation.bias_seed, t, frames, dim)))
            .collect();
        Ok(Self {
            mixture,
            schedule,
            grid,
            perturbation,
            biases,
            counters: EvalCounters::default(),
        })
    }

    pub fn grid(&self) -> &TimestepGrid {
        &self.grid
    }

    pub fn perturbation(&self) -> StudentPerturbation {
        self.perturbation
    }
}

impl Denoiser for StudentModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn epsilon(&self, z: &LatentVideo, c: &Condition, t: usize) -> Result<LatentVideo> {
        self.grid.check(t)?;
        let exact = exact_epsilon(&self.mixture, &self.schedule, z, c, t)?;
        if self.perturbation.bias_amplitude == 0.0 {
            return Ok(exact);
        }
        exact.lin_comb(1.0, &self.biases[&t], self.perturbation.bias_amplitude)
    }

    fn epsilon_vjp(&self, z: &LatentVideo, c: &Condition, t: usize, v: &LatentVideo) -> Result<LatentVideo> {
        self.grid.check(t)?;
        exact_epsilon_vjp(&self.mixture, &self.schedule, z, c, t, v)
    }

    fn counters(&self) -> &EvalCounters {
        &self.counters
    }
}

/// One-step clean prediction `(z - sqrt(1 - ab) eps) / sqrt(ab)` at noise level `alpha_bar`.
pub fn one_step_x0_at(z: &LatentVideo, eps: &LatentVideo, alpha_bar: f64) -> Result<LatentVideo> {
    z.ensure_shape(eps)?;
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    let values = z
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(&zi, &ei)| (zi - b * ei) / a)
        .collect();
    LatentVideo::from_vec(z.frames(), z.dim(), values)
}

pub fn one_step_x0(z: &LatentVideo, eps: &LatentVideo, t: usize, schedule: &NoiseSchedule) -> Result<LatentVideo> {
    schedule.check_noisy(t)?;
    one_step_x0_at(z, eps, schedule.alpha_bar_at(t)?)
}

/// Reference motion: `frame[i+1] = ar * frame[i] + drift + noise_scale * n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub drift: Vec<f64>,
    pub ar: f64,
    pub noise_scale: f64,
}

/// Synthesizes a reference video. Frame 0 is a draw from a component of the
/// condition's subset (chosen by weight); later frames follow the AR(1)
/// recursion in `motion`.
pub fn sample_reference<R: Rng + ?Sized>(
    mixture: &MixtureModel,
    c: &Condition,
    motion: &MotionSpec,
    frames: usize,
    dim: usize,
    rng: &mut R,
) -> Result<LatentVideo> {
    if frames < 2 {
        return Err(invalid("frames", "a reference needs at least two frames"));
    }
    if mixture.shape() != (frames, dim) {
        return Err(EchoError::ShapeMismatch {
            expected: mixture.shape(),
            actual: (frames, dim),
        });
    }
    if motion.drift.len() != dim {
        return Err(invalid(
            "drift",
            format!("expected {dim} entries, got {}", motion.drift.len()),
        ));
    }
    if !(motion.noise_scale >= 0.0) || !motion.ar.is_finite() {
        return Err(invalid("motion", "noise_scale must be nonnegative and ar finite"));
    }
    let subset = mixture.subset(c)?;
    let total: f64 = subset.iter().map(|&k| mixture.components[k].weight).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut chosen = *subset.last().unwrap();
    for &k in subset {
        acc += mixture.components[k].weight;
        if u < acc {
            chosen = k;
            break;
        }
    }
    let comp = &mixture.components[chosen];
    let sd = comp.variance.sqrt();
    let mut values = Vec::with_capacity(frames * dim);
    for j in 0..dim {
        let n: f64 = StandardNormal.sample(rng);
        values.push(comp.mean.get(0, j) + sd * n);
    }
    for i in 1..frames {
        for j in 0..dim {
            let n: f64 = StandardNormal.sample(rng);
            let prev = values[(i - 1) * dim + j];
            values.push(motion.ar * prev + motion.drift[j] + motion.noise_scale * n);
        }
    }
    LatentVideo::from_vec(frames, dim, values)
}
