//! Guidance primitives: classifier-free guidance, energy guidance on the
//! noise prediction, renoising, and student/teacher endpoint interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::latent::LatentVideo;
use crate::motion::{FeatureKind, GradientMode};
use crate::rng::NoiseStream;
use crate::schedule::NoiseSchedule;
use crate::toyworld::{Condition, Denoiser};

/// How the teacher moves between its own inner timesteps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerNoise {
    /// Renoise the predicted endpoint with a fresh draw from the teacher stream.
    #[default]
    Fresh,
    /// Reuse the guided noise prediction (DDIM-style, no draws).
    Ddim,
}

/// Every scalar knob of the adaptive sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub omega_student: f64,
    pub omega_teacher: f64,
    /// Motion guidance strength.
    pub eta: f64,
    /// Teacher guidance strength.
    pub lambda: f64,
    /// Guidance is applied only at `t > tau * T`.
    pub tau: f64,
    /// Blend factor of the hybrid initial noise.
    pub k: f64,
    /// Activation threshold on the windowed student motion loss.
    #[serde(with = "extended_f64")]
    pub delta1: f64,
    /// Truncation threshold on the teacher's motion loss.
    #[serde(with = "extended_f64")]
    pub delta2: f64,
    pub window: usize,
    pub n_max: usize,
    /// Reference timestep; `None` picks the teacher step nearest `0.4 T`.
    pub t_alpha: Option<usize>,
    /// Position of the inner teacher start inside the student interval,
    /// measured down from the current student step.
    pub inner_start_fraction: f64,
    pub mask_keep_fraction: f64,
    pub feature: FeatureKind,
    pub gradient: GradientMode,
    pub inner_noise: InnerNoise,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega_student: 1.0,
            omega_teacher: 1.0,
            eta: 1.0,
            lambda: 0.3,
            tau: 0.4,
            k: 0.01,
            delta1: 0.0,
            delta2: 0.0,
            window: 2,
            n_max: 10,
            t_alpha: None,
            inner_start_fraction: 0.5,
            mask_keep_fraction: 0.5,
            feature: FeatureKind::CleanPrediction,
            gradient: GradientMode::Analytic,
            inner_noise: InnerNoise::Fresh,
        }
    }
}

impl GuidanceConfig {
    /// Checks ranges; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let unit = |name: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(name, format!("{v} is outside [0, 1]")))
            }
        };
        unit("lambda", self.lambda)?;
        unit("tau", self.tau)?;
        unit("k", self.k)?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(invalid("eta", format!("{} must be finite and nonnegative", self.eta)));
        }
        if !self.omega_student.is_finite() || !self.omega_teacher.is_finite() {
            return Err(invalid("omega", "guidance scales must be finite"));
        }
        if self.window == 0 {
            return Err(invalid("window", "must be at least 1"));
        }
        if !(self.inner_start_fraction > 0.0 && self.inner_start_fraction <= 1.0) {
            return Err(invalid(
                "inner_start_fraction",
                format!("{} is outside (0, 1]", self.inner_start_fraction),
            ));
        }
        if !(self.mask_keep_fraction > 0.0 && self.mask_keep_fraction <= 1.0) {
            return Err(invalid(
                "mask_keep_fraction",
                format!("{} is outside (0, 1]", self.mask_keep_fraction),
            ));
        }
        if self.delta1.is_nan() || self.delta2.is_nan() {
            return Err(invalid("delta", "thresholds must not be NaN"));
        }
        let mut warnings = Vec::new();
        if self.delta2 > self.delta1 {
            warnings.push(format!(
                "delta2 ({}) exceeds delta1 ({}); teacher refinement will mostly truncate immediately",
                self.delta2, self.delta1
            ));
        }
        Ok(warnings)
    }
}

/// `(1 + omega) eps(z, c, t) - omega eps(z, null, t)`; two counted evaluations.
pub fn cfg_epsilon<M: Denoiser + ?Sized>(
    model: &M,
    z: &LatentVideo,
    c: &Condition,
    t: usize,
    omega: f64,
) -> Result<LatentVideo> {
    let cond = model.predict_epsilon(z, c, t)?;
    let uncond = model.predict_epsilon(z, &Condition::Unconditional, t)?;
    cond.lin_comb(1.0 + omega, &uncond, -omega)
}

/// `eps_tilde - eta * motion_grad`.
pub fn guided_epsilon(eps_tilde: &LatentVideo, motion_grad: &LatentVideo, eta: f64) -> Result<LatentVideo> {
    eps_tilde.lin_comb(1.0, motion_grad, -eta)
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` with `eps` from `noise`. At `t = 0`
/// returns `x0` without drawing.
pub fn renoise(x0: &LatentVideo, t: usize, schedule: &NoiseSchedule, noise: &mut NoiseStream) -> Result<LatentVideo> {
    let ab = schedule.alpha_bar_at(t)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let eps = noise.standard_normal(x0.frames(), x0.dim());
    renoise_with(x0, &eps, ab)
}

/// [`renoise`] with an explicit noise draw.
pub fn renoise_with(x0: &LatentVideo, eps: &LatentVideo, alpha_bar: f64) -> Result<LatentVideo> {
    x0.lin_comb(alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

/// `(1 - lambda) x0_student + lambda x0_teacher`.
pub fn interpolate_x0(x0_student: &LatentVideo, x0_teacher: &LatentVideo, lambda: f64) -> Result<LatentVideo> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("lambda", format!("{lambda} is outside [0, 1]")));
    }
    x0_student.lin_comb(1.0 - lambda, x0_teacher, lambda)
}

/// Serde for `f64` fields that may be infinite: non-finite values travel as
/// the strings `"inf"` / `"-inf"`, finite ones as plain numbers.
pub mod extended_f64 {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = f64;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or one of \"inf\", \"-inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v {
                    "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                    "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                    "nan" => Ok(f64::NAN),
                    other => other.parse().map_err(|_| E::custom(format!("bad number `{other}`"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}
