//! Seedable, stream-splittable random number generation.
//!
//! Every stochastic operation in the crate takes an explicit [`StreamRng`]
//! handle. A handle is identified by a `(seed, stream)` pair on top of a
//! counter-based generator, so independent sub-streams can be derived from a
//! master seed without coordination (one stream per trajectory, per scene,
//! per worker...). Identical `(seed, stream)` pairs replay bit-identically.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A named random stream. Cheap to create, deterministic replay.
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl StreamRng {
    /// Stream 0 of the given master seed.
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Stream `stream` of the given master seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        StreamRng { inner, seed }
    }

    /// Derive an independent sub-stream by counter, e.g. one per trajectory.
    pub fn substream(&self, counter: u64) -> Self {
        Self::stream(self.seed ^ 0x9e37_79b9_7f4a_7c15, counter)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Rademacher draw (+1 or -1 with equal probability).
    pub fn rademacher(&mut self) -> f64 {
        if self.inner.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    /// Matrix of i.i.d. standard normals, filled row-major.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| self.normal())
    }

    /// Fisher-Yates sample of `m` indices from [0, n) without replacement.
    pub fn choose_indices(&mut self, n: usize, m: usize) -> Vec<usize> {
        assert!(m <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(m);
        idx
    }
}
