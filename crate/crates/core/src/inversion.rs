//! DDIM inversion of the reference video, deterministic DDIM sampling, the
//! hybrid initial noise, and construction (and caching) of reference bundles.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{invalid, EchoError, Result};
use crate::latent::LatentVideo;
use crate::motion::{derive_mask, feature_latent, temporal_attention, FeatureKind, ReferenceBundle};
use crate::rng::NoiseStream;
use crate::schedule::{NoiseSchedule, TimestepGrid};
use crate::toyworld::{one_step_x0, one_step_x0_at, Condition, Denoiser, MixtureModel};

/// Maps a clean latent up the grid to `T` with the conditional prediction
/// (no CFG). Returns `(z_T, z_record_at)`.
///
/// Each step `t -> t'` predicts `x0` from `eps(z_t, t)` and moves to
/// `sqrt(ab_t') x0 + sqrt(1 - ab_t') eps`. The first step starts at `t = 0`,
/// where no prediction exists, and evaluates the model at `t'` instead.
pub fn ddim_invert<M: Denoiser + ?Sized>(
    model: &M,
    z0: &LatentVideo,
    c: &Condition,
    grid: &TimestepGrid,
    record_at: usize,
) -> Result<(LatentVideo, LatentVideo)> {
    let schedule = model.schedule();
    if grid.total_steps() != schedule.total_steps() {
        return Err(invalid("inversion_grid", "grid and schedule disagree on T"));
    }
    grid.check(record_at)?;
    let mut z = z0.clone();
    let mut recorded = None;
    let mut prev = 0;
    for &next in grid.steps().iter().rev() {
        let (eps, x0) = if prev == 0 {
            let eps = model.predict_epsilon(&z, c, next)?;
            let x0 = one_step_x0_at(&z, &eps, 1.0)?;
            (eps, x0)
        } else {
            let eps = model.predict_epsilon(&z, c, prev)?;
            let x0 = one_step_x0(&z, &eps, prev, schedule)?;
            (eps, x0)
        };
        let ab = schedule.alpha_bar_at(next)?;
        z = x0.lin_comb(ab.sqrt(), &eps, (1.0 - ab).sqrt())?;
        if !z.is_finite() {
            return Err(EchoError::NonFinite {
                t: next,
                stage: "inversion",
            });
        }
        if next == record_at {
            recorded = Some(z.clone());
        }
        prev = next;
    }
    let recorded = recorded.expect("record_at is on the grid");
    Ok((z, recorded))
}

/// Deterministic DDIM sampling down the grid with the conditional prediction.
pub fn ddim_sample<M: Denoiser + ?Sized>(
    model: &M,
    z_t: &LatentVideo,
    c: &Condition,
    grid: &TimestepGrid,
) -> Result<LatentVideo> {
    let schedule = model.schedule();
    let mut z = z_t.clone();
    for &t in grid.steps() {
        let eps = model.predict_epsilon(&z, c, t)?;
        let x0 = one_step_x0(&z, &eps, t, schedule)?;
        let next = t - grid.stride();
        if next == 0 {
            return Ok(x0);
        }
        let ab = schedule.alpha_bar_at(next)?;
        z = x0.lin_comb(ab.sqrt(), &eps, (1.0 - ab).sqrt())?;
    }
    Ok(z)
}

/// Hybrid initial noise `sqrt(k) z_ref_T + sqrt(1 - k) eps`.
pub fn blend_init(z_ref_t: &LatentVideo, k: f64, noise: &mut NoiseStream) -> Result<LatentVideo> {
    if !(0.0..=1.0).contains(&k) {
        return Err(invalid("k", format!("{k} is outside [0, 1]")));
    }
    let eps = noise.standard_normal(z_ref_t.frames(), z_ref_t.dim());
    z_ref_t.lin_comb(k.sqrt(), &eps, (1.0 - k).sqrt())
}

/// Teacher-grid timestep nearest `0.4 T`.
pub fn default_t_alpha(grid: &TimestepGrid) -> usize {
    grid.nearest(0.4 * grid.total_steps() as f64)
}

/// Inverts the reference on `grid`, records it at `t_alpha`, and derives the
/// reference attention map and mask from its feature latent.
pub fn build_bundle<M: Denoiser + ?Sized>(
    teacher: &M,
    z_ref: &LatentVideo,
    c: &Condition,
    grid: &TimestepGrid,
    t_alpha: usize,
    keep_fraction: f64,
    feature: FeatureKind,
) -> Result<ReferenceBundle> {
    let (z_ref_t, z_ref_talpha) = ddim_invert(teacher, z_ref, c, grid, t_alpha)?;
    let x = feature_latent(&z_ref_talpha, feature, teacher, c, t_alpha)?;
    let a_ref = temporal_attention(&x);
    let mask = derive_mask(&a_ref, keep_fraction)?;
    Ok(ReferenceBundle {
        z_ref_t,
        z_ref_talpha,
        a_ref,
        mask,
        t_alpha,
        feature,
    })
}

#[derive(Serialize)]
struct BundleKey<'a> {
    mixture: &'a MixtureModel,
    schedule: &'a NoiseSchedule,
    reference: &'a LatentVideo,
    condition: &'a Condition,
    grid: &'a TimestepGrid,
    t_alpha: usize,
    keep_fraction: f64,
    feature: FeatureKind,
}

/// On-disk cache of reference bundles, one JSON file per content hash.
#[derive(Clone, Debug)]
pub struct BundleCache {
    dir: PathBuf,
}

impl BundleCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Hex SHA-256 over everything the bundle depends on.
    #[allow(clippy::too_many_arguments)]
    pub fn key(
        mixture: &MixtureModel,
        schedule: &NoiseSchedule,
        reference: &LatentVideo,
        condition: &Condition,
        grid: &TimestepGrid,
        t_alpha: usize,
        keep_fraction: f64,
        feature: FeatureKind,
    ) -> String {
        let key = BundleKey {
            mixture,
            schedule,
            reference,
            condition,
            grid,
            t_alpha,
            keep_fraction,
            feature,
        };
        let bytes = serde_json::to_vec(&key).expect("bundle key serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("bundle-{key}.json"))
    }

    pub fn load(&self, key: &str) -> Option<ReferenceBundle> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn store(&self, key: &str, bundle: &ReferenceBundle) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| EchoError::Io(e.to_string()))?;
        let text = serde_json::to_string(bundle).map_err(|e| EchoError::Io(e.to_string()))?;
        fs::write(self.path(key), text).map_err(|e| EchoError::Io(e.to_string()))
    }

    pub fn get_or_build(&self, key: &str, build: impl FnOnce() -> Result<ReferenceBundle>) -> Result<ReferenceBundle> {
        if let Some(b) = self.load(key) {
            return Ok(b);
        }
        let bundle = build()?;
        self.store(key, &bundle)?;
        Ok(bundle)
    }
}
