//! Deterministic splittable PRNG.
//!
//! SplitMix64 core with keyed substream derivation. Every parallel task
//! (group simulation, bootstrap replicate, Monte Carlo shard) derives its
//! own child stream from the parent's root seed and a task index, so the
//! sequence a task sees is a pure function of (seed, key path) and results
//! are identical for any worker count.

/// SplitMix64 finalizer; good avalanche, used both as the generator step
/// and for key derivation.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// A deterministic random stream.
///
/// `root` is the stream identity (used only for derivation); `state`
/// advances with each draw.
#[derive(Debug, Clone)]
pub struct RngStream {
    root: u64,
    state: u64,
    gauss_spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { root: seed, state: seed, gauss_spare: None }
    }

    /// Child stream keyed by `tag`. Independent of how many values have
    /// been drawn from `self`.
    pub fn derive(&self, tag: u64) -> Self {
        let child = mix(self.root.wrapping_add(GOLDEN).wrapping_add(mix(tag ^ 0xA5A5_5A5A_DEAD_BEEF)));
        Self::new(child)
    }

    /// Child stream keyed by a path of tags.
    pub fn derive_path(&self, tags: &[u64]) -> Self {
        let mut s = self.clone();
        s.gauss_spare = None;
        for &t in tags {
            s = s.derive(t);
        }
        s
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform on [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on (0, 1].
    #[inline]
    pub fn next_f64_open_closed(&mut self) -> f64 {
        1.0 - self.next_f64()
    }

    /// Unbiased uniform integer in [0, n). Panics if n == 0.
    pub fn gen_range(&mut self, n: u64) -> u64 {
        assert!(n > 0, "gen_range(0)");
        // Lemire's multiply-shift rejection method.
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            let low = m as u64;
            if low < n {
                let threshold = n.wrapping_neg() % n;
                if low < threshold {
                    continue;
                }
            }
            return (m >> 64) as u64;
        }
    }

    /// Uniform integer in [1, n] (n >= 1).
    #[inline]
    pub fn gen_range_1_to(&mut self, n: u64) -> u64 {
        1 + self.gen_range(n)
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Exponential with the given mean.
    #[inline]
    pub fn exponential(&mut self, mean: f64) -> f64 {
        -mean * self.next_f64_open_closed().ln()
    }

    /// Standard normal via Box-Muller (second value cached).
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        let u1 = self.next_f64_open_closed();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Poisson draw (Knuth's method; fine for the small rates used here).
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        if lambda <= 0.0 {
            return 0;
        }
        if lambda > 30.0 {
            // Normal approximation for large rates.
            let z = self.gaussian();
            return (lambda + lambda.sqrt() * z).round().max(0.0) as u64;
        }
        let limit = (-lambda).exp();
        let mut k: u64 = 0;
        let mut p = 1.0;
        loop {
            p *= self.next_f64();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.gen_range((i + 1) as u64) as usize;
            items.swap(i, j);
        }
    }

    /// Pick an index in [0, weights.len()) with probability proportional
    /// to the weights. Panics on empty or non-positive total.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "weighted_index: non-positive total weight");
        let mut target = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            target -= w;
            if target < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}
