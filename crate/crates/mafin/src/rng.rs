//! Deterministic randomness: a labeled seed hierarchy and platform-stable hashing.
//!
//! Every random decision in the engine flows through a [`ChaCha20Rng`] seeded
//! from a global seed plus a string label (`child_seed`), so each subsystem
//! gets an independent, reproducible stream without coupling to call order.
//! `hash64` is a fixed FNV-1a/splitmix combination used wherever a hash must
//! be identical across platforms and standard-library versions (feature
//! hashing, stub embeddings, cache keys are separate and use SHA-256).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// splitmix64 finalizer; scrambles FNV output so every bit is usable.
#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hash byte slices into a single u64, seeded. Stable across platforms.
pub fn hash64(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(seed);
    for part in parts {
        // Length prefix keeps ("ab","c") distinct from ("a","bc").
        for b in (part.len() as u64).to_le_bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
        for &b in *part {
            h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
    }
    splitmix64(h)
}

/// Derive a child seed from a root seed and a label.
///
/// Labels namespace the streams: `child_seed(s, "split")` and
/// `child_seed(s, "train")` are independent for any root `s`.
pub fn child_seed(root: u64, label: &str) -> u64 {
    hash64(root, &[b"seed-tree", label.as_bytes()])
}

/// A ChaCha20 generator for the given seed. ChaCha20 output is specified
/// byte-for-byte, so streams reproduce across platforms.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// One standard normal draw via Box-Muller (kept in-tree so the sampling
/// algorithm cannot drift with dependency upgrades).
pub fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.gen::<f64>();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// In-place Fisher-Yates shuffle with an explicit, frozen algorithm.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha20Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash64_is_deterministic_and_label_sensitive() {
        let a = hash64(1, &[b"abc"]);
        assert_eq!(a, hash64(1, &[b"abc"]));
        assert_ne!(a, hash64(2, &[b"abc"]));
        assert_ne!(a, hash64(1, &[b"abd"]));
        // length prefixing: concatenation boundaries matter
        assert_ne!(hash64(1, &[b"ab", b"c"]), hash64(1, &[b"a", b"bc"]));
    }

    #[test]
    fn child_seeds_are_independent() {
        let s = child_seed(42, "split");
        assert_eq!(s, child_seed(42, "split"));
        assert_ne!(s, child_seed(42, "train"));
        assert_ne!(s, child_seed(43, "split"));
    }

    #[test]
    fn seeded_rng_reproduces() {
        let mut a = seeded_rng(7);
        let mut b = seeded_rng(7);
        for _ in 0..16 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn standard_normal_moments_are_sane() {
        let mut rng = seeded_rng(11);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let mut a: Vec<u32> = (0..50).collect();
        let mut b: Vec<u32> = (0..50).collect();
        shuffle(&mut a, &mut seeded_rng(3));
        shuffle(&mut b, &mut seeded_rng(3));
        assert_eq!(a, b);
        let mut c: Vec<u32> = (0..50).collect();
        shuffle(&mut c, &mut seeded_rng(4));
        assert_ne!(a, c);
    }
}
