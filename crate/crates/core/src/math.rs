//! Dense vector kernels and the deterministic random generator.
//!
//! All reductions here run strictly left to right so that repeated runs are
//! bit-identical. Tree-shaped reductions live in [`crate::mesh`].

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};

/// Flat parameter / gradient container.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_len("dot", self.len(), other.len())?;
        Ok(self.0.iter().zip(&other.0).fold(0.0, |acc, (a, b)| acc + a * b))
    }

    /// Sum of squares, accumulated left to right.
    pub fn sq_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, x| acc + x * x)
    }

    pub fn l2_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |acc: f64, x| acc.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, a: f64) -> Vector {
        Vector(self.0.iter().map(|x| a * x).collect())
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        check_len("sub", self.len(), other.len())?;
        Ok(Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        check_len("add", self.len(), other.len())?;
        Ok(Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    /// In-place `self += a * x`.
    pub fn axpy_in_place(&mut self, a: f64, x: &Vector) -> Result<()> {
        check_len("axpy", self.len(), x.len())?;
        for (y, xi) in self.0.iter_mut().zip(&x.0) {
            *y += a * xi;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.0.iter_mut().for_each(|x| *x = value);
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self(data)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Returns `a * x + y`; inputs are left untouched.
pub fn axpy(a: f64, x: &Vector, y: &Vector) -> Result<Vector> {
    let mut out = y.clone();
    out.axpy_in_place(a, x)?;
    Ok(out)
}

pub fn l2_norm(x: &Vector) -> f64 {
    x.l2_norm()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of tags into a single stream label.
pub fn stream_id(tags: &[u64]) -> u64 {
    tags.iter()
        .fold(0x5EED_0000_0000_0001u64, |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Seeded generator addressed by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose output is specified independently of the host
/// platform. Distinct stream ids select disjoint keystreams.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Generator for a stream labelled by several tags (worker, step, ...).
    pub fn derived(seed: u64, tags: &[u64]) -> Self {
        Self::new(seed, stream_id(tags))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Gaussian draw whose zero-mean part is truncated to `[-clip_abs, clip_abs]`.
    ///
    /// Truncation is by rejection; after 64 rejected draws the last one is
    /// clamped, so `|result - mean| <= clip_abs` always holds.
    pub fn normal_sample(&mut self, mean: f64, std: f64, clip_abs: f64) -> f64 {
        if std == 0.0 {
            return mean;
        }
        let mut z = 0.0;
        for _ in 0..64 {
            z = std * self.standard_normal();
            if z.abs() <= clip_abs {
                return mean + z;
            }
        }
        mean + z.clamp(-clip_abs, clip_abs)
    }
}

pub fn normal_sample(rng: &mut Rng, mean: f64, std: f64, clip_abs: f64) -> f64 {
    rng.normal_sample(mean, std, clip_abs)
}
