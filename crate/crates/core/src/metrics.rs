//! Toy motion-fidelity and temporal-consistency scores, and NFE accounting.

use serde::{Deserialize, Serialize};

use crate::latent::LatentVideo;
use crate::sampler::{SamplerTrace, Stage, Truncation};

/// Frame-to-frame displacements of a video.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTrajectory {
    pub displacements: Vec<Vec<f64>>,
}

impl MotionTrajectory {
    pub fn from_video(video: &LatentVideo) -> Self {
        let displacements = (1..video.frames())
            .map(|i| {
                video
                    .frame(i)
                    .iter()
                    .zip(video.frame(i - 1))
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect();
        Self { displacements }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean cosine similarity between corresponding displacements. Pairs with a
/// zero displacement on either side are skipped; `None` if all are.
pub fn motion_fidelity_toy(generated: &LatentVideo, reference: &LatentVideo) -> Option<f64> {
    if generated.shape() != reference.shape() {
        return None;
    }
    let g = MotionTrajectory::from_video(generated);
    let r = MotionTrajectory::from_video(reference);
    mean(
        g.displacements
            .iter()
            .zip(&r.displacements)
            .filter_map(|(a, b)| cosine(a, b)),
    )
}

/// Mean cosine similarity between consecutive frames; `None` if any frame is zero
/// or there is only one frame.
pub fn temporal_consistency_toy(video: &LatentVideo) -> Option<f64> {
    if video.frames() < 2 {
        return None;
    }
    let sims: Option<Vec<f64>> = (1..video.frames())
        .map(|i| cosine(video.frame(i - 1), video.frame(i)))
        .collect();
    mean(sims?.into_iter())
}

/// Compute spent by one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeReport {
    pub student_nfe: u64,
    pub teacher_nfe: u64,
    pub gradient_evals: u64,
    pub activated_steps: u64,
    pub inner_steps: u64,
    pub truncated_threshold: u64,
    pub truncated_n_max: u64,
}

pub fn nfe_report(trace: &SamplerTrace) -> NfeReport {
    trace.records.iter().fold(NfeReport::default(), |mut acc, r| {
        acc.student_nfe += r.student_nfe;
        acc.teacher_nfe += r.teacher_nfe;
        acc.gradient_evals += r.gradient_evals;
        acc.inner_steps += r.inner_steps as u64;
        if r.stage == Stage::TeacherGuided {
            acc.activated_steps += 1;
        }
        match r.truncated_by {
            Truncation::Threshold => acc.truncated_threshold += 1,
            Truncation::NMax => acc.truncated_n_max += 1,
            Truncation::None => {}
        }
        acc
    })
}
