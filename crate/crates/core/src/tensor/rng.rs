use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Seeded random source.
///
/// Backed by ChaCha8 seeded through `seed_from_u64`, which is specified to
/// produce the same stream on every platform. Normal draws use
/// `rand_distr::StandardNormal` (ziggurat). Neither choice may change without
/// invalidating every recorded run.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a named role, see [`derive_seed`].
    pub fn derived(seed: u64, role: &str) -> Self {
        Self::new(derive_seed(seed, role))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor {
        debug_assert!(std >= 0.0);
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            let z: f64 = self.inner.sample(StandardNormal);
            *x = mean + std * z;
        }
        t
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        debug_assert!(lo <= hi);
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = self.uniform_scalar(lo, hi);
        }
        t
    }

    /// Draw from `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform_scalar(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.inner.random();
        let x = lo + (hi - lo) * u;
        if x >= hi {
            lo
        } else {
            x
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..bound`.
    pub fn below(&mut self, bound: u64) -> u64 {
        self.inner.random_range(0..bound)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Sub-seed for `role`: SplitMix64 finalizer over `seed ^ fnv1a64(role)`.
pub fn derive_seed(seed: u64, role: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in role.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = (seed ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_constant() {
        let t = Rng::new(1).normal(&[4, 5], 2.5, 0.0);
        assert!(t.data().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn uniform_fill_range() {
        let t = Rng::new(2).uniform(&[10_000], 0.001, 0.01);
        assert!(t.data().iter().all(|&x| (0.001..0.01).contains(&x)));
    }

    #[test]
    fn same_seed_same_draws() {
        let a = Rng::new(42).normal(&[3, 3], 0.0, 1.0);
        let b = Rng::new(42).normal(&[3, 3], 0.0, 1.0);
        assert_eq!(a, b);
        let c = Rng::new(43).normal(&[3, 3], 0.0, 1.0);
        assert_ne!(a, c);
    }

    #[test]
    fn moments_within_five_sigma() {
        let n = 100_000;
        let t = Rng::new(9).normal(&[n], 1.0, 2.0);
        let mean = t.data().iter().sum::<f64>() / n as f64;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // se(mean) = 2/sqrt(n); se(sd) ~ 2/sqrt(2n)
        assert!((mean - 1.0).abs() < 5.0 * 2.0 / (n as f64).sqrt());
        assert!((var.sqrt() - 2.0).abs() < 5.0 * 2.0 / (2.0 * n as f64).sqrt());

        let u = Rng::new(10).uniform(&[n], -1.0, 3.0);
        let um = u.data().iter().sum::<f64>() / n as f64;
        // sd of U(-1,3) is 4/sqrt(12)
        assert!((um - 1.0).abs() < 5.0 * (4.0 / 12f64.sqrt()) / (n as f64).sqrt());
    }

    #[test]
    fn derived_seeds_differ_by_role() {
        assert_ne!(derive_seed(0, "init"), derive_seed(0, "data"));
        assert_eq!(derive_seed(5, "init"), derive_seed(5, "init"));
    }
}
