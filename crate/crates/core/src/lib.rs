//! Few-step video sampling that follows a reference motion, with a
//! fine-step teacher called in only when needed. Everything runs on analytic
//! Gaussian-mixture toy worlds, so every model evaluation is exact.
//!
//! A coarse-step student sampler is steered toward a reference motion by an
//! energy term on its noise prediction, and, when its windowed motion loss
//! stays high, a fine-step teacher refines the student's endpoint across the
//! student interval. The refined teacher endpoint is blended back into the
//! student trajectory.

// NaN-rejecting range checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod guidance;
pub mod inversion;
pub mod latent;
pub mod metrics;
pub mod motion;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod toyworld;
pub mod world;

pub use error::{EchoError, Result};
pub use guidance::{cfg_epsilon, guided_epsilon, interpolate_x0, renoise, GuidanceConfig, InnerNoise};
pub use inversion::{blend_init, build_bundle, ddim_invert, ddim_sample, default_t_alpha, BundleCache};
pub use latent::LatentVideo;
pub use metrics::{motion_fidelity_toy, nfe_report, temporal_consistency_toy, NfeReport};
pub use motion::{
    clean_motion_loss, derive_mask, motion_loss, motion_loss_grad, temporal_attention, AttentionMap, FeatureKind,
    GradientMode, ReferenceBundle, TemporalMask,
};
pub use rng::{NoiseStream, RunSeeds, RunStreams};
pub use sampler::{
    run_baseline, run_echo, run_observed, should_activate, teacher_refine, EchoInputs, Grids, LossHistory, RunKind,
    SamplerTrace, Stage, StepRecord, Truncation,
};
pub use schedule::{make_grid, make_linear_schedule, NoiseSchedule, TimestepGrid};
pub use toyworld::{
    exact_epsilon, one_step_x0, sample_reference, student_epsilon, Condition, Denoiser, MixtureComponent, MixtureModel,
    MotionSpec, StudentModel, StudentPerturbation, TeacherModel,
};
pub use world::{World, WorldSpec};
