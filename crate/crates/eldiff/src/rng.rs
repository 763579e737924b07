//! Deterministic random streams.
//!
//! Every consumer of randomness (noise draws, shuffling, sampling) gets its
//! own named substream derived from one root seed, so a single seed
//! reproduces an entire run bit-exactly. Streams are backed by the ChaCha8
//! counter-based generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub const RNG_ALGORITHM: &str = "chacha8";

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

/// FNV-1a over the stream name, then splitmix64 to spread the bits.
fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Derives an independent stream; the draw sequence depends only on
    /// (root seed, name), never on how much this stream has been consumed.
    pub fn substream(&self, name: &str) -> RngStream {
        RngStream::new(derive_seed(self.seed, name))
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        assert!(n > 0, "uniform_usize over empty range");
        self.rng.gen_range(0..n)
    }

    pub fn uniform_f32(&mut self, lo: f32, hi: f32) -> f32 {
        self.rng.gen_range(lo..hi)
    }

    pub fn standard_normal(&mut self) -> f32 {
        self.rng.sample::<f32, _>(StandardNormal)
    }

    pub fn standard_normal_f64(&mut self) -> f64 {
        self.rng.sample::<f64, _>(StandardNormal)
    }

    /// Tensor of i.i.d. N(0,1) draws in row-major element order.
    pub fn normal_tensor(&mut self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.standard_normal()).collect();
        Tensor::new(shape, data).expect("shape/product consistency")
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices out of `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.rng.gen_range(i..n);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
