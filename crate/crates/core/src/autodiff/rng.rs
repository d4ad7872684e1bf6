//! Named, splittable random streams.
//!
//! Every stream is a ChaCha8 generator whose key is derived from a root seed
//! and a path of names/indices, so any stream can be recreated without
//! replaying the ones before it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a name.
pub fn derive_seed(parent: u64, name: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    mix64(parent ^ mix64(h))
}

/// Derives a child seed from a parent seed and an index.
pub fn derive_index(parent: u64, index: u64) -> u64 {
    mix64(parent ^ mix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream addressed by name.
    pub fn split(&self, name: &str) -> RngStream {
        RngStream::new(derive_seed(self.seed, name))
    }

    /// Independent child stream addressed by index.
    pub fn split_index(&self, index: u64) -> RngStream {
        RngStream::new(derive_index(self.seed, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<u64> = {
            let mut s = RngStream::new(7).split("shuffle").split_index(3);
            (0..4).map(|_| s.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut s = RngStream::new(7).split("shuffle").split_index(3);
            (0..4).map(|_| s.next_u64()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn different_names_give_different_streams() {
        let root = RngStream::new(1);
        assert_ne!(root.split("a").seed(), root.split("b").seed());
        assert_ne!(root.split_index(0).seed(), root.split_index(1).seed());
    }

    #[test]
    fn range_is_inclusive() {
        let mut s = RngStream::new(0);
        let mut seen = [false; 3];
        for _ in 0..200 {
            seen[s.range(2, 4) - 2] = true;
        }
        assert!(seen.iter().all(|&x| x));
    }
}
