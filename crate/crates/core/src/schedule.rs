//! Noise schedule and the coarse/fine timestep grids.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, EchoError, Result};

/// Discrete-time variance schedule. `alpha_bar[0] = 1` and `alpha_bar[t]`
/// is the cumulative product of `1 - beta` over the first `t` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    total_steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step variances.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("total_steps", "must be at least 1"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid("beta", format!("{b} is outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for &b in &beta {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self {
            total_steps: beta.len(),
            beta,
            alpha_bar,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(EchoError::TimestepOutOfRange {
            t,
            min: 0,
            max: self.total_steps,
        })
    }

    pub(crate) fn check_noisy(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps {
            return Err(EchoError::TimestepOutOfRange {
                t,
                min: 1,
                max: self.total_steps,
            });
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    /// Linear betas in `[1e-4, 0.02]` over 1000 steps.
    fn default() -> Self {
        make_linear_schedule(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// Linear-beta schedule over `total_steps` steps.
pub fn make_linear_schedule(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if total_steps == 0 {
        return Err(invalid("total_steps", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_end < 1.0) {
        return Err(invalid(
            "beta",
            format!("[{beta_start}, {beta_end}] must lie in (0, 1)"),
        ));
    }
    if beta_start > beta_end {
        return Err(invalid("beta_start", "must not exceed beta_end"));
    }
    let beta = if total_steps == 1 {
        vec![beta_start]
    } else {
        let span = (total_steps - 1) as f64;
        (0..total_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect()
    };
    NoiseSchedule::from_betas(beta)
}

/// Uniform, strictly decreasing timestep grid `[T, T - stride, ..., stride]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepGrid {
    steps: Vec<usize>,
    stride: usize,
}

impl TimestepGrid {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.steps[0]
    }

    pub fn contains(&self, t: usize) -> bool {
        t > 0 && t <= self.total_steps() && t.is_multiple_of(self.stride)
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(EchoError::OffGrid { t, stride: self.stride })
        }
    }

    /// Largest grid point `<= t`, or 0 when `t` is below the first stride.
    pub fn snap_down(&self, t: usize) -> usize {
        (t.min(self.total_steps()) / self.stride) * self.stride
    }

    /// Grid point nearest `t` (ties go to the larger timestep).
    pub fn nearest(&self, t: f64) -> usize {
        let k = (t / self.stride as f64).round().max(1.0) as usize;
        (k * self.stride).min(self.total_steps())
    }
}

/// Grid with `n` uniform steps over `[0, total_steps]`; `n` must divide `total_steps`.
pub fn make_grid(total_steps: usize, n: usize) -> Result<TimestepGrid> {
    if total_steps == 0 {
        return Err(invalid("total_steps", "must be at least 1"));
    }
    if n == 0 || !total_steps.is_multiple_of(n) {
        return Err(invalid(
            "steps",
            format!("{n} sampler steps do not divide {total_steps} diffusion steps"),
        ));
    }
    let stride = total_steps / n;
    let steps = (1..=n).rev().map(|i| i * stride).collect();
    Ok(TimestepGrid { steps, stride })
}
