//! Named, seeded Gaussian noise streams.
//!
//! Every stochastic draw in a run comes from one of these streams. Each run
//! owns three independent streams (initialization, student loop, teacher
//! loop), all ChaCha8 with the run seed and a fixed stream id, so teacher
//! activity never shifts the student's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::latent::LatentVideo;

pub const INIT_STREAM: u64 = 0;
pub const STUDENT_STREAM: u64 = 1;
pub const TEACHER_STREAM: u64 = 2;
pub const REFERENCE_STREAM: u64 = 3;

pub fn chacha(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Source of standard-normal latents. The zero variant returns all zeros,
/// which turns every renoising step into a pure rescaling.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: Option<ChaCha8Rng>,
    draws: u64,
}

impl NoiseStream {
    pub fn seeded(seed: u64, stream: u64) -> Self {
        Self {
            rng: Some(chacha(seed, stream)),
            draws: 0,
        }
    }

    pub fn zero() -> Self {
        Self { rng: None, draws: 0 }
    }

    pub fn is_zero(&self) -> bool {
        self.rng.is_none()
    }

    /// Number of latents drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn standard_normal(&mut self, frames: usize, dim: usize) -> LatentVideo {
        self.draws += 1;
        match &mut self.rng {
            Some(rng) => LatentVideo::from_fn(frames, dim, |_, _| StandardNormal.sample(rng)),
            None => LatentVideo::zeros(frames, dim),
        }
    }
}

/// Seeds recorded alongside a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub seed: u64,
    pub init_stream: u64,
    pub student_stream: u64,
    pub teacher_stream: u64,
    pub deterministic: bool,
}

/// The three per-run streams.
#[derive(Clone, Debug)]
pub struct RunStreams {
    pub init: NoiseStream,
    pub student: NoiseStream,
    pub teacher: NoiseStream,
    seeds: RunSeeds,
}

impl RunStreams {
    pub fn new(seed: u64, deterministic: bool) -> Self {
        let make = |stream| {
            if deterministic {
                NoiseStream::zero()
            } else {
                NoiseStream::seeded(seed, stream)
            }
        };
        Self {
            init: make(INIT_STREAM),
            student: make(STUDENT_STREAM),
            teacher: make(TEACHER_STREAM),
            seeds: RunSeeds {
                seed,
                init_stream: INIT_STREAM,
                student_stream: STUDENT_STREAM,
                teacher_stream: TEACHER_STREAM,
                deterministic,
            },
        }
    }

    pub fn seeds(&self) -> RunSeeds {
        self.seeds
    }
}
