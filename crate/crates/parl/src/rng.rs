//! Seeded random streams with stable output across platforms and versions.
//!
//! Every random draw in the crate flows through a ChaCha8 stream keyed by an
//! explicit mix of `u64` components (run seed, member index, epoch, ...), and
//! floats are derived from raw bits here rather than through distribution
//! adapters. Identical seeds therefore give bitwise-identical runs.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Scalar;

/// splitmix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds seed components into a single stream key.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3u64; // arbitrary non-zero start
    for &p in parts {
        acc = splitmix(acc ^ p);
    }
    acc
}

/// A fresh ChaCha8 stream keyed by the mixed components.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn unit(rng: &mut ChaCha8Rng) -> Scalar {
    ((rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) as Scalar
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, lo: Scalar, hi: Scalar) -> Scalar {
    lo + (hi - lo) * unit(rng)
}

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut ChaCha8Rng) -> Scalar {
    let u1 = 1.0 - unit(rng); // (0, 1], keeps the log finite
    let u2 = unit(rng);
    let r = (-2.0 * (u1 as f64).ln()).sqrt();
    (r * (std::f64::consts::TAU * u2 as f64).cos()) as Scalar
}

/// Unbiased draw from `0..n` by rejection.
pub fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "below: empty range");
    let n = n as u64;
    let zone = u64::MAX - u64::MAX % n;
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
