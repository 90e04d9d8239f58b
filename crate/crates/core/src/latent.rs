//! Frame-major latent videos: `F` frames of `D` real coordinates each.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, EchoError, Result};

/// An `F x D` real matrix stored row-major, one row per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVideo {
    frames: usize,
    dim: usize,
    values: Vec<f64>,
}

impl LatentVideo {
    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            values: vec![0.0; frames * dim],
        }
    }

    pub fn from_vec(frames: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(invalid("shape", "frames and dim must be positive"));
        }
        if values.len() != frames * dim {
            return Err(invalid(
                "values",
                format!("expected {} entries, got {}", frames * dim, values.len()),
            ));
        }
        Ok(Self { frames, dim, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let frames = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(invalid("rows", "ragged rows"));
        }
        Self::from_vec(frames, dim, rows.concat())
    }

    pub fn from_fn(frames: usize, dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(frames * dim);
        for i in 0..frames {
            for j in 0..dim {
                values.push(f(i, j));
            }
        }
        Self { frames, dim, values }
    }

    /// A video whose every frame equals `frame`.
    pub fn repeat_frame(frame: &[f64], frames: usize) -> Self {
        Self::from_fn(frames, frame.len(), |_, j| frame[j])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.dim)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.frames).map(|i| self.frame(i).to_vec()).collect()
    }

    pub fn ensure_shape(&self, other: &LatentVideo) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(EchoError::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            frames: self.frames,
            dim: self.dim,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `a * self + b * other`, elementwise.
    pub fn lin_comb(&self, a: f64, other: &LatentVideo, b: f64) -> Result<Self> {
        self.ensure_shape(other)?;
        Ok(self.zip_with(other, |x, y| a * x + b * y))
    }

    pub fn add(&self, other: &LatentVideo) -> Result<Self> {
        self.ensure_shape(other)?;
        Ok(self.zip_with(other, |x, y| x + y))
    }

    pub fn sub(&self, other: &LatentVideo) -> Result<Self> {
        self.ensure_shape(other)?;
        Ok(self.zip_with(other, |x, y| x - y))
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn dot(&self, other: &LatentVideo) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    fn zip_with(&self, other: &LatentVideo, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            frames: self.frames,
            dim: self.dim,
            values: self.values.iter().zip(&other.values).map(|(&x, &y)| f(x, y)).collect(),
        }
    }
}
