//! Deterministic counter-split random streams.
//!
//! Every stochastic step in the crate draws from a [`Stream`] derived from a
//! master seed by hashing a path of integer tags (epoch, step, sample, ...).
//! Streams are independent of scheduling order, so parallel workers produce
//! the same numbers as a serial run.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; used to mix tags into stream keys.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A key identifying one random stream. Children are derived by folding
/// tags through splitmix64, so `key.child(a).child(b)` differs from
/// `key.child(b).child(a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(splitmix64(seed ^ 0x4D44_475F_5345_4544)) // "MDG_SEED"
    }

    pub fn child(self, tag: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(tag)))
    }

    pub fn stream(self) -> Stream {
        Stream::from_key(self)
    }
}

/// A seeded ChaCha8 stream with Gaussian sampling via Box-Muller.
pub struct Stream {
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn from_key(key: StreamKey) -> Self {
        Stream {
            rng: ChaCha8Rng::seed_from_u64(key.0),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Uniform integer in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index called with n = 0");
        // Rejection sampling keeps the distribution exactly uniform.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn next_bool(&mut self) -> bool {
        self.rng.next_u64() & 1 == 1
    }

    /// Standard normal via Box-Muller; caches the spare value.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        loop {
            let u1 = self.next_uniform();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let u2 = self.next_uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
            self.spare_normal = Some(r * s);
            return r * c;
        }
    }

    /// Fill a vector with standard normals.
    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }

    /// Sample k distinct indices from [0, n) (partial Fisher-Yates).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
