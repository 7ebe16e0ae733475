//! Vectors in the shared text/audio embedding space.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl Embedding {
    pub fn raw(values: Vec<f32>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// L2-normalizes `values` (accumulating in f64).
    pub fn unit(values: Vec<f32>) -> Self {
        Self::raw(values).normalized()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        let values = if n > 0.0 {
            self.values.iter().map(|&v| (v as f64 / n) as f32).collect()
        } else {
            self.values.clone()
        };
        Self {
            values,
            normalized: true,
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    /// Cosine similarity, clamped to `[-1, 1]`.
    pub fn cosine(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return input_err(format!("embedding dims differ: {} vs {}", self.dim(), other.dim()));
        }
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            return Ok(0.0);
        }
        Ok((self.dot(other) / denom).clamp(-1.0, 1.0))
    }

    pub fn scaled(&self, c: f32) -> Self {
        Self::raw(self.values.iter().map(|v| v * c).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}
