//! Deterministic random streams.
//!
//! Every stochastic step in the pipeline (corruption, weight init, shuffling,
//! dropout) pulls from a [`SeededStream`]: a ChaCha8 counter-based generator
//! with the uniform/Gaussian constructions pinned *here* rather than
//! delegated to distribution crates, so the exact draw sequence is a stable
//! artifact of this repository regardless of dependency versions or platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// A seeded ChaCha8 stream with explicit uniform and Box-Muller Gaussian
/// draws.
pub struct SeededStream {
    rng: ChaCha8Rng,
    /// Box-Muller produces pairs; the second value is cached.
    spare_gaussian: Option<f64>,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        SeededStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare_gaussian: None,
        }
    }

    /// Derive an independent stream for a labelled sub-task. The label is
    /// mixed into the seed with splitmix64 so e.g. per-window dropout streams
    /// never overlap.
    pub fn derive(seed: u64, label: u64) -> Self {
        let mut z = seed ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        Self::new(z ^ (z >> 31))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random mantissa bits.
    #[inline]
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (2.0f64).powi(-53)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Standard normal via Box-Muller.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (2.0f64).powi(-53);
        let u2 = self.uniform01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Normal with the given standard deviation.
    #[inline]
    pub fn gaussian_std(&mut self, std: f64) -> f64 {
        self.gaussian() * std
    }

    /// Normal with the given std, resampled until within two standard
    /// deviations (the usual truncated-normal weight init).
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.gaussian();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededStream::new(42);
        let mut b = SeededStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = SeededStream::new(42);
        let mut b = SeededStream::new(43);
        assert_ne!(
            (0..8).map(|_| a.next_u64()).collect::<Vec<_>>(),
            (0..8).map(|_| b.next_u64()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let mut rng = SeededStream::new(7);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = SeededStream::new(3);
        for _ in 0..10_000 {
            let x = rng.uniform(0.45, 0.55);
            assert!((0.45..0.55).contains(&x));
        }
    }

    #[test]
    fn truncated_normal_respects_the_cut() {
        let mut rng = SeededStream::new(5);
        for _ in 0..10_000 {
            assert!(rng.truncated_normal(0.02).abs() <= 0.04);
        }
    }

    #[test]
    fn derived_streams_differ_by_label() {
        let mut a = SeededStream::derive(9, 0);
        let mut b = SeededStream::derive(9, 1);
        assert_ne!(a.next_u64(), b.next_u64());
        // ... but are reproducible.
        let mut a2 = SeededStream::derive(9, 0);
        assert_eq!(SeededStream::derive(9, 0).next_u64(), a2.next_u64());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = SeededStream::new(11);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, (0..50).collect::<Vec<_>>());
    }
}
