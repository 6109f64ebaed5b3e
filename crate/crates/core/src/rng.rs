//! Seeded random streams.
//!
//! A stream is a ChaCha8 keystream keyed by the 64-bit seed and selected by a
//! 64-bit stream id, so output depends only on `(seed, stream, draws so far)`.
//! Sub-streams are derived by hashing the parent id with a child index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Fresh stream for child `index`, independent of how much of `self` was consumed.
    pub fn derive(&self, index: u64) -> RngStream {
        RngStream::new(self.seed, splitmix(self.stream ^ splitmix(index.wrapping_add(1))))
    }

    /// Derives along a path of indices, e.g. `[step, layer, example]`.
    pub fn derive_path(&self, path: &[u64]) -> RngStream {
        path.iter().fold(self.clone(), |r, &i| r.derive(i))
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }

    /// iid N(0, 1) tensor.
    pub fn standard_normal<T: Scalar>(&mut self, shape: impl Into<Vec<usize>>) -> Tensor<T> {
        let shape = shape.into();
        Tensor::from_fn(shape, |_| T::from_f64_lossy(self.normal()))
    }

    /// iid U(-bound, bound) tensor.
    pub fn uniform_tensor<T: Scalar>(&mut self, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64_lossy((2.0 * self.uniform() - 1.0) * bound))
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}
