//! Declarative description of a toy world and the assembled objects a run needs.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::guidance::GuidanceConfig;
use crate::inversion::{build_bundle, default_t_alpha, BundleCache};
use crate::latent::LatentVideo;
use crate::motion::ReferenceBundle;
use crate::rng::{chacha, RunStreams, REFERENCE_STREAM};
use crate::sampler::{run_observed, EchoInputs, Grids, RunKind, SamplerTrace, StepOutcome};
use crate::schedule::{make_grid, make_linear_schedule, NoiseSchedule, TimestepGrid};
use crate::toyworld::{
    sample_reference, Condition, MixtureComponent, MixtureModel, MotionSpec, StudentModel, StudentPerturbation,
    TeacherModel,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub student_steps: usize,
    pub teacher_steps: usize,
    /// Inversion grid size; defaults to the teacher grid.
    #[serde(default)]
    pub inversion_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub variance: f64,
    /// Either one row (repeated for every frame) or one row per frame.
    pub mean: Vec<Vec<f64>>,
    #[serde(default)]
    pub class: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub frames: usize,
    pub dim: usize,
    pub schedule: ScheduleSpec,
    pub components: Vec<ComponentSpec>,
    /// Prompt for generated videos.
    pub condition: Condition,
    /// Prompt the reference video is drawn from and inverted with.
    pub reference_condition: Condition,
    pub motion: MotionSpec,
    pub reference_seed: u64,
    pub student: StudentPerturbation,
}

impl WorldSpec {
    /// Benchmark world: 8 frames of 4 dims, 16 student and 256 teacher steps
    /// over T = 1024. Class "a" is a two-component conditional, one component
    /// drifting along the reference motion and one static; class "b" is a
    /// distant static distractor that gives CFG something to push against.
    pub fn benchmark() -> Self {
        let frames = 8;
        let base = [2.0, 0.0, 0.0, 0.0];
        let drift = [0.0, 0.3, 0.2, 0.0];
        let moving = (0..frames)
            .map(|i| (0..4).map(|j| base[j] + i as f64 * drift[j]).collect())
            .collect();
        let variance = 0.05;
        WorldSpec {
            frames,
            dim: 4,
            schedule: ScheduleSpec {
                total_steps: 1024,
                beta_start: 1e-4,
                beta_end: 0.02,
                student_steps: 16,
                teacher_steps: 256,
                inversion_steps: None,
            },
            components: vec![
                ComponentSpec {
                    weight: 0.35,
                    variance,
                    mean: moving,
                    class: Some("a".into()),
                },
                ComponentSpec {
                    weight: 0.35,
                    variance,
                    mean: vec![base.to_vec()],
                    class: Some("a".into()),
                },
                ComponentSpec {
                    weight: 0.3,
                    variance,
                    mean: vec![vec![-2.0, 0.0, 0.0, 0.0]],
                    class: Some("b".into()),
                },
            ],
            condition: Condition::class("a"),
            reference_condition: Condition::class("a"),
            motion: MotionSpec {
                drift: drift.to_vec(),
                ar: 1.0,
                noise_scale: 0.05,
            },
            reference_seed: 2024,
            student: StudentPerturbation {
                bias_amplitude: 0.005,
                bias_seed: 2,
            },
        }
    }

    pub fn mixture(&self) -> Result<MixtureModel> {
        let mut classes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut components = Vec::with_capacity(self.components.len());
        for (k, c) in self.components.iter().enumerate() {
            let mean = match c.mean.len() {
                1 => {
                    if c.mean[0].len() != self.dim {
                        return Err(invalid(
                            "components.mean",
                            format!("component {k}: expected {} dims", self.dim),
                        ));
                    }
                    LatentVideo::repeat_frame(&c.mean[0], self.frames)
                }
                n if n == self.frames => {
                    let m = LatentVideo::from_rows(&c.mean)?;
                    if m.dim() != self.dim {
                        return Err(invalid(
                            "components.mean",
                            format!("component {k}: expected {} dims", self.dim),
                        ));
                    }
                    m
                }
                n => {
                    return Err(invalid(
                        "components.mean",
                        format!("component {k}: {n} rows, expected 1 or {}", self.frames),
                    ))
                }
            };
            if let Some(label) = &c.class {
                classes.entry(label.clone()).or_default().push(k);
            }
            components.push(MixtureComponent {
                weight: c.weight,
                mean,
                variance: c.variance,
            });
        }
        MixtureModel::new(components, classes)
    }
}

/// A built world: schedule, mixture, grids and the reference video.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub schedule: Arc<NoiseSchedule>,
    pub mixture: Arc<MixtureModel>,
    pub grids: Grids,
    pub inversion_grid: TimestepGrid,
    pub reference: LatentVideo,
}

impl World {
    pub fn build(spec: &WorldSpec) -> Result<Self> {
        if spec.frames < 2 {
            return Err(invalid("frames", "at least two frames are needed to define motion"));
        }
        let s = &spec.schedule;
        let schedule = make_linear_schedule(s.total_steps, s.beta_start, s.beta_end)?;
        let student = make_grid(s.total_steps, s.student_steps)?;
        let teacher = make_grid(s.total_steps, s.teacher_steps)?;
        let grids = Grids::new(student, teacher)?;
        let inversion_grid = make_grid(s.total_steps, s.inversion_steps.unwrap_or(s.teacher_steps))?;
        let mixture = spec.mixture()?;
        mixture.subset(&spec.condition)?;
        let mut rng = chacha(spec.reference_seed, REFERENCE_STREAM);
        let reference = sample_reference(
            &mixture,
            &spec.reference_condition,
            &spec.motion,
            spec.frames,
            spec.dim,
            &mut rng,
        )?;
        if !(spec.student.bias_amplitude >= 0.0) {
            return Err(invalid("student.bias_amplitude", "must be nonnegative"));
        }
        Ok(Self {
            spec: spec.clone(),
            schedule: Arc::new(schedule),
            mixture: Arc::new(mixture),
            grids,
            inversion_grid,
            reference,
        })
    }

    pub fn condition(&self) -> &Condition {
        &self.spec.condition
    }

    pub fn teacher(&self) -> TeacherModel {
        TeacherModel::new(self.mixture.clone(), self.schedule.clone())
    }

    pub fn student(&self) -> Result<StudentModel> {
        StudentModel::new(
            self.mixture.clone(),
            self.schedule.clone(),
            self.grids.student.clone(),
            self.spec.student,
        )
    }

    pub fn t_alpha(&self, config: &GuidanceConfig) -> Result<usize> {
        let t = config.t_alpha.unwrap_or_else(|| default_t_alpha(&self.inversion_grid));
        if !self.inversion_grid.contains(t) {
            return Err(invalid(
                "t_alpha",
                format!(
                    "{t} is not on the inversion grid (stride {})",
                    self.inversion_grid.stride()
                ),
            ));
        }
        Ok(t)
    }

    /// Reference bundle for `config`, optionally through an on-disk cache.
    pub fn bundle(&self, config: &GuidanceConfig, cache: Option<&BundleCache>) -> Result<ReferenceBundle> {
        let t_alpha = self.t_alpha(config)?;
        let cond = &self.spec.reference_condition;
        let build = || {
            build_bundle(
                &self.teacher(),
                &self.reference,
                cond,
                &self.inversion_grid,
                t_alpha,
                config.mask_keep_fraction,
                config.feature,
            )
        };
        match cache {
            None => build(),
            Some(cache) => {
                let key = BundleCache::key(
                    &self.mixture,
                    &self.schedule,
                    &self.reference,
                    cond,
                    &self.inversion_grid,
                    t_alpha,
                    config.mask_keep_fraction,
                    config.feature,
                );
                cache.get_or_build(&key, build)
            }
        }
    }

    /// One seeded run of `kind` with fresh models.
    pub fn run(
        &self,
        kind: RunKind,
        config: &GuidanceConfig,
        bundle: &ReferenceBundle,
        seed: u64,
        deterministic: bool,
    ) -> Result<(LatentVideo, SamplerTrace)> {
        self.run_observed(kind, config, bundle, seed, deterministic, |_| {})
    }

    pub fn run_observed<F: FnMut(StepOutcome<'_>)>(
        &self,
        kind: RunKind,
        config: &GuidanceConfig,
        bundle: &ReferenceBundle,
        seed: u64,
        deterministic: bool,
        observer: F,
    ) -> Result<(LatentVideo, SamplerTrace)> {
        let student = self.student()?;
        let teacher = self.teacher();
        let mut streams = RunStreams::new(seed, deterministic);
        let inputs = EchoInputs {
            student: &student,
            teacher: &teacher,
            bundle,
            condition: &self.spec.condition,
            grids: &self.grids,
        };
        run_observed(kind, config, inputs, &mut streams, observer)
    }
}
