// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so a value can
//! be produced for any element without walking a sequential generator. Masks
//! sampled in parallel are therefore identical to masks sampled serially.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a, used to turn tensor names into stream ids.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed.wrapping_add(GOLDEN)),
        }
    }

    /// Derives an independent generator for a named stream.
    pub fn stream(self, name: &str) -> Self {
        self.substream(fnv1a(name.as_bytes()))
    }

    pub fn substream(self, id: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(id.wrapping_add(GOLDEN))),
        }
    }

    #[inline]
    pub fn u64_at(self, counter: u64) -> u64 {
        mix64(self.key ^ mix64(counter.wrapping_mul(GOLDEN).wrapping_add(self.key)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform_at(self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on two counters.
    pub fn normal_at(self, counter: u64) -> f64 {
        let u1 = self.uniform_at(counter.wrapping_mul(2));
        let u2 = self.uniform_at(counter.wrapping_mul(2).wrapping_add(1));
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (std::f64::consts::TAU * u2).cos()
    }
}

/// Sequential convenience wrapper over [`CounterRng`].
#[derive(Debug, Clone)]
pub struct Stream {
    rng: CounterRng,
    next: u64,
}

impl Stream {
    pub fn new(rng: CounterRng) -> Self {
        Self { rng, next: 0 }
    }

    pub fn uniform(&mut self) -> f64 {
        let v = self.rng.uniform_at(self.next);
        self.next += 1;
        v
    }

    pub fn normal(&mut self) -> f64 {
        let v = self.rng.normal_at(self.next);
        self.next += 1;
        v
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_pure_functions_of_the_key() {
        let a = CounterRng::new(7).stream("w");
        let b = CounterRng::new(7).stream("w");
        assert_eq!(a.u64_at(123), b.u64_at(123));
        assert_ne!(a.u64_at(123), CounterRng::new(8).stream("w").u64_at(123));
        assert_ne!(a.u64_at(123), CounterRng::new(7).stream("v").u64_at(123));
    }

    #[test]
    fn uniform_moments() {
        let rng = CounterRng::new(1);
        let n = 200_000;
        let mean = (0..n).map(|i| rng.uniform_at(i)).sum::<f64>() / n as f64;
        // sd of the mean is 1/sqrt(12 n) ~ 6.5e-4
        assert!((mean - 0.5).abs() < 3e-3, "{mean}");
    }

    #[test]
    fn normal_moments() {
        let rng = CounterRng::new(2);
        let n = 200_000u64;
        let xs: Vec<f64> = (0..n).map(|i| rng.normal_at(i)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut s = Stream::new(CounterRng::new(3));
        let mut v: Vec<usize> = (0..50).collect();
        s.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
