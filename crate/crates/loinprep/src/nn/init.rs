//! Seeded weight initializers.

use super::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Xavier/Glorot uniform for a (fan_in × fan_out) weight matrix.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    Tensor {
        rows,
        cols,
        data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    }
}

/// He/Kaiming normal, suited to rectifier activations.
pub fn he(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / rows as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor {
        rows,
        cols,
        data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    }
}

/// Zero-mean normal with explicit standard deviation (embeddings, tokens).
pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor {
        rows,
        cols,
        data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
    }
}
