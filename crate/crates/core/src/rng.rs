//! Seeded random streams.
//!
//! Every stochastic routine takes a [`RngHandle`]. Streams are ChaCha8, so a
//! seed reproduces the same draws on every platform. Concurrent work must
//! not share a handle: derive one per task with [`RngHandle::fork`] (draws a
//! child seed from the parent) or [`RngHandle::stream`] (stateless, keyed by
//! `(seed, stream)`).

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

#[derive(Clone, Debug)]
pub struct RngHandle {
    inner: ChaCha8Rng,
}

impl RngHandle {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` of `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Child handle seeded from the next draw of this one.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Draw from `Normal(mean, std^2)`; `std == 0` returns `mean` exactly.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            // keep the stream position independent of sigma
            let _ = self.standard_normal();
            return mean;
        }
        Normal::new(mean, std)
            .expect("finite standard deviation")
            .sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    /// Uniformly chosen `k`-subset of `0..n`, in ascending order.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        let mut out = idx[..k.min(n)].to_vec();
        out.sort_unstable();
        out
    }
}
