//! Temporal attention as the motion representation, the masked motion loss
//! and its gradient with respect to the noisy latent.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, EchoError, Result};
use crate::latent::LatentVideo;
use crate::toyworld::{one_step_x0, Condition, Denoiser};

/// Row-stochastic `F x F` frame-affinity matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    frames: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.frames + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.frames..(i + 1) * self.frames]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Wraps explicit rows, checking that each is a probability vector.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let frames = rows.len();
        if frames == 0 || rows.iter().any(|r| r.len() != frames) {
            return Err(invalid("attention", "rows must form a nonempty square matrix"));
        }
        for r in rows {
            if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(invalid("attention", "rows must be nonnegative and sum to 1"));
            }
        }
        Ok(Self {
            frames,
            values: rows.concat(),
        })
    }
}

/// Binary `F x F` mask selecting the attention entries that are supervised.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalMask {
    frames: usize,
    values: Vec<bool>,
}

impl TemporalMask {
    pub fn ones(frames: usize) -> Self {
        Self {
            frames,
            values: vec![true; frames * frames],
        }
    }

    pub fn zeros(frames: usize) -> Self {
        Self {
            frames,
            values: vec![false; frames * frames],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.values[i * self.frames + j]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if self.get(i, j) {
            1.0
        } else {
            0.0
        }
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.values[i * self.frames..(i + 1) * self.frames]
            .iter()
            .filter(|v| **v)
            .count()
    }
}

/// Which latent the attention map is computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// The one-step clean prediction of the latent.
    #[default]
    CleanPrediction,
    /// The noisy latent itself.
    NoisyLatent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Analytic,
    /// Central differences with step `1e-5`; slow, for cross-checking.
    FiniteDifference,
}

/// Everything the motion loss needs from the reference video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBundle {
    /// Fully inverted reference latent.
    pub z_ref_t: LatentVideo,
    /// Reference latent on the inversion trajectory at `t_alpha`.
    pub z_ref_talpha: LatentVideo,
    pub a_ref: AttentionMap,
    pub mask: TemporalMask,
    pub t_alpha: usize,
    pub feature: FeatureKind,
}

/// Row softmax of the scaled frame Gram matrix `z z^T / sqrt(D)`.
pub fn temporal_attention(z: &LatentVideo) -> AttentionMap {
    let (frames, dim) = z.shape();
    let scale = 1.0 / (dim as f64).sqrt();
    let mut values = vec![0.0; frames * frames];
    for i in 0..frames {
        let row = &mut values[i * frames..(i + 1) * frames];
        let xi = z.frame(i);
        for (j, out) in row.iter_mut().enumerate() {
            *out = xi.iter().zip(z.frame(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    AttentionMap { frames, values }
}

/// Keeps, per row, the `ceil(p F)` largest entries; ties go to the lower column.
pub fn derive_mask(a_ref: &AttentionMap, keep_fraction: f64) -> Result<TemporalMask> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(invalid("keep_fraction", format!("{keep_fraction} is outside (0, 1]")));
    }
    let f = a_ref.frames;
    // the epsilon absorbs representation error in fractions like 2/3
    let keep = ((keep_fraction * f as f64 - 1e-9).ceil() as usize).clamp(1, f);
    let mut mask = TemporalMask::zeros(f);
    for i in 0..f {
        let row = a_ref.row(i);
        let mut order: Vec<usize> = (0..f).collect();
        order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        for &j in &order[..keep] {
            mask.values[i * f + j] = true;
        }
    }
    Ok(mask)
}

/// `sum_ij M_ij (A_ref_ij - A_ij)^2`.
pub fn masked_attention_loss(a_ref: &AttentionMap, mask: &TemporalMask, a: &AttentionMap) -> f64 {
    a_ref
        .values
        .iter()
        .zip(&a.values)
        .zip(&mask.values)
        .filter(|(_, m)| **m)
        .map(|((r, x), _)| (r - x) * (r - x))
        .sum()
}

/// Motion loss of an already-clean latent (no denoiser involved); used to
/// score final samples.
pub fn clean_motion_loss(x: &LatentVideo, bundle: &ReferenceBundle) -> Result<f64> {
    check_frames(x, bundle)?;
    Ok(masked_attention_loss(
        &bundle.a_ref,
        &bundle.mask,
        &temporal_attention(x),
    ))
}

/// The latent whose attention map represents `z` at timestep `t`.
pub fn feature_latent<M: Denoiser + ?Sized>(
    z: &LatentVideo,
    kind: FeatureKind,
    model: &M,
    c: &Condition,
    t: usize,
) -> Result<LatentVideo> {
    match kind {
        FeatureKind::CleanPrediction => {
            let eps = model.epsilon(z, c, t)?;
            one_step_x0(z, &eps, t, model.schedule())
        }
        FeatureKind::NoisyLatent => Ok(z.clone()),
    }
}

fn check_frames(z: &LatentVideo, bundle: &ReferenceBundle) -> Result<()> {
    if z.frames() != bundle.a_ref.frames() || bundle.mask.frames() != bundle.a_ref.frames() {
        return Err(EchoError::ShapeMismatch {
            expected: (bundle.a_ref.frames(), z.dim()),
            actual: z.shape(),
        });
    }
    Ok(())
}

fn loss_value<M: Denoiser + ?Sized>(
    z: &LatentVideo,
    bundle: &ReferenceBundle,
    model: &M,
    c: &Condition,
    t: usize,
) -> Result<f64> {
    let x = feature_latent(z, bundle.feature, model, c, t)?;
    Ok(masked_attention_loss(
        &bundle.a_ref,
        &bundle.mask,
        &temporal_attention(&x),
    ))
}

/// Motion loss `|| M . (A_ref - A(feature(z))) ||^2` at timestep `t`.
pub fn motion_loss<M: Denoiser + ?Sized>(
    z: &LatentVideo,
    bundle: &ReferenceBundle,
    model: &M,
    c: &Condition,
    t: usize,
) -> Result<f64> {
    check_frames(z, bundle)?;
    model.counters().record_loss();
    loss_value(z, bundle, model, c, t)
}

/// Gradient of [`motion_loss`] with respect to `z`.
pub fn motion_loss_grad<M: Denoiser + ?Sized>(
    z: &LatentVideo,
    bundle: &ReferenceBundle,
    model: &M,
    c: &Condition,
    t: usize,
    mode: GradientMode,
) -> Result<LatentVideo> {
    check_frames(z, bundle)?;
    model.counters().record_grad();
    match mode {
        GradientMode::Analytic => analytic_grad(z, bundle, model, c, t),
        GradientMode::FiniteDifference => {
            let h = 1e-5;
            let mut grad = LatentVideo::zeros(z.frames(), z.dim());
            let mut probe = z.clone();
            for i in 0..z.len() {
                let orig = probe.as_slice()[i];
                probe.as_mut_slice()[i] = orig + h;
                let up = loss_value(&probe, bundle, model, c, t)?;
                probe.as_mut_slice()[i] = orig - h;
                let down = loss_value(&probe, bundle, model, c, t)?;
                probe.as_mut_slice()[i] = orig;
                grad.as_mut_slice()[i] = (up - down) / (2.0 * h);
            }
            Ok(grad)
        }
    }
}

fn analytic_grad<M: Denoiser + ?Sized>(
    z: &LatentVideo,
    bundle: &ReferenceBundle,
    model: &M,
    c: &Condition,
    t: usize,
) -> Result<LatentVideo> {
    let x = feature_latent(z, bundle.feature, model, c, t)?;
    let a = temporal_attention(&x);
    let f = a.frames;
    let (frames, dim) = x.shape();

    // dG/dA
    let mut d_a = vec![0.0; f * f];
    for (idx, d) in d_a.iter_mut().enumerate() {
        if bundle.mask.values[idx] {
            *d = -2.0 * (bundle.a_ref.values[idx] - a.values[idx]);
        }
    }
    // softmax rows -> logits
    let mut d_l = vec![0.0; f * f];
    for i in 0..f {
        let row = a.row(i);
        let drow = &d_a[i * f..(i + 1) * f];
        let inner: f64 = row.iter().zip(drow).map(|(p, d)| p * d).sum();
        for j in 0..f {
            d_l[i * f + j] = row[j] * (drow[j] - inner);
        }
    }
    // logits = x x^T / sqrt(D)
    let scale = 1.0 / (dim as f64).sqrt();
    let mut d_x = LatentVideo::zeros(frames, dim);
    {
        let out = d_x.as_mut_slice();
        for i in 0..f {
            for j in 0..f {
                let w = (d_l[i * f + j] + d_l[j * f + i]) * scale;
                if w == 0.0 {
                    continue;
                }
                let xj = x.frame(j);
                for k in 0..dim {
                    out[i * dim + k] += w * xj[k];
                }
            }
        }
    }
    match bundle.feature {
        FeatureKind::NoisyLatent => Ok(d_x),
        FeatureKind::CleanPrediction => {
            // x = (z - sqrt(1 - ab) eps(z)) / sqrt(ab)
            let ab = model.schedule().alpha_bar_at(t)?;
            let jt = model.epsilon_vjp(z, c, t, &d_x)?;
            let (a0, b0) = (ab.sqrt(), (1.0 - ab).sqrt());
            let values = d_x
                .as_slice()
                .iter()
                .zip(jt.as_slice())
                .map(|(g, j)| (g - b0 * j) / a0)
                .collect();
            LatentVideo::from_vec(frames, dim, values)
        }
    }
}
