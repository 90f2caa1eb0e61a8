//! Named, versioned random substreams derived from one root seed.
//!
//! Each consumer (instance generation, initial point, minibatches, output
//! index) owns an independent ChaCha20 stream whose key is
//! `SHA-256(root_seed_le || 0x00 || name || 0x00 || version)`. Changing how
//! many draws one stream consumes never shifts another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub use rand_chacha::ChaCha20Rng as StreamRng;

/// Version tag mixed into every substream key.
pub const STREAM_VERSION: &str = "v1";

pub const INSTANCE_STREAM: &str = "instance-gen";
pub const INIT_STREAM: &str = "init";
pub const MINIBATCH_STREAM: &str = "minibatch";
pub const OUTPUT_INDEX_STREAM: &str = "output-index";

/// Independent generator for `(root_seed, name)`.
pub fn substream(root_seed: u64, name: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(name.as_bytes());
    hasher.update([0u8]);
    hasher.update(STREAM_VERSION.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

/// Standard normal draw (ziggurat, via `rand_distr::StandardNormal`).
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<f64> {
    (0..count).map(|_| normal(rng)).collect()
}

/// Uniform draw in `[lo, hi)`; returns `lo` when the interval is degenerate.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// `count` distinct indices from `0..n`, sorted ascending so that summation
/// order is canonical. When `count >= n` every index is returned.
pub fn minibatch<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut picked = rand::seq::index::sample(rng, n, count).into_vec();
    picked.sort_unstable();
    picked
}
