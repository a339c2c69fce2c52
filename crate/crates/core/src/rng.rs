//! Seedable, splittable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed. Child streams
//! are derived by mixing the parent seed with a label, so the same
//! `(seed, label path)` always reproduces the same numbers regardless of how
//! much the parent stream has been consumed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(splitmix64(seed)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by a name.
    pub fn named(&self, label: &str) -> Self {
        Self::new(splitmix64(self.seed ^ fnv1a(label)))
    }

    /// Independent child stream identified by an index.
    pub fn child(&self, index: u64) -> Self {
        Self::new(splitmix64(self.seed.rotate_left(17) ^ splitmix64(index)))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Uniform draw on the half-open interval `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    /// Uniform integer on the closed range `[lo, hi]`.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        if hi <= lo {
            return lo;
        }
        self.rng.random_range(lo..=hi)
    }

    /// Fisher-Yates shuffle of the index list `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Root streams for one run.
#[derive(Clone, Debug)]
pub struct SeedRoots {
    pub data: RngStream,
    pub init: RngStream,
    pub noise: RngStream,
}

/// Derive the independent data, initialization and training-noise streams
/// for a run seed.
pub fn seed_everything(seed: u64) -> SeedRoots {
    let root = RngStream::new(seed);
    SeedRoots {
        data: root.named("data"),
        init: root.named("init"),
        noise: root.named("noise"),
    }
}
