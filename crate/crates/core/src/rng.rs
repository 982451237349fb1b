//! Counter-based pseudo-random source.
//!
//! Every draw is a pure function of `(seed, counter)`: the `i`-th output is the
//! SplitMix64 finalizer applied to `seed + (i + 1) * GOLDEN`. Results therefore
//! do not depend on platform randomness or on thread scheduling, and any
//! stream can be regenerated from its seed alone.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines several integers into one seed. Used to derive per-run streams such
/// as `(global_seed, client_id, round, image_id)`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5E_ED0F_6A11_u64, |acc, &p| {
        finalize(acc.wrapping_add(GOLDEN) ^ finalize(p.wrapping_add(GOLDEN)))
    })
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed, counter: 0 }
    }

    pub fn at(seed: u64, counter: u64) -> u64 {
        finalize(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = Self::at(self.seed, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in the open interval (0, 1), 53 bits of resolution.
    pub fn open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.open01()
    }

    /// Standard normal via Box–Muller; consumes two draws, uses the cosine branch.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.open01();
        let u2 = self.open01();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Zero-mean Laplace with scale `b` by inverse CDF.
    pub fn laplace(&mut self, b: f64) -> f64 {
        let u = self.open01() - 0.5;
        -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
