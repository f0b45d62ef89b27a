//! Counter-based splittable pseudo-random streams.
//!
//! Every stochastic component draws from a [`Stream`] derived by hashing a
//! parent key with a child index (run -> group -> trajectory -> turn). Streams
//! derived this way are independent of execution order, so rollouts can run
//! under any parallel schedule and still reproduce bit-identical results.
//! The core generator is SplitMix64 (Vigna); non-cryptographic.

/// One level of the seed hierarchy. Cheap to copy, never mutated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stream {
    key: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Stream {
    pub fn from_seed(seed: u64) -> Self {
        Stream {
            key: mix(seed.wrapping_add(GOLDEN)),
        }
    }

    /// Derive the `index`-th child stream. Children with distinct indices are
    /// statistically independent of each other and of the parent.
    #[must_use]
    pub fn derive(&self, index: u64) -> Stream {
        Stream {
            key: mix(self.key ^ mix(index.wrapping_add(GOLDEN))),
        }
    }

    /// Derive a child keyed by a short domain label, for separating unrelated
    /// uses of one seed (e.g. goal sampling vs. user noise).
    #[must_use]
    pub fn derive_labeled(&self, label: &str) -> Stream {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in label.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3);
        }
        Stream {
            key: mix(self.key ^ mix(h)),
        }
    }

    /// Start drawing values from this stream.
    pub fn rng(&self) -> Rng {
        Rng { state: self.key }
    }
}

/// SplitMix64 generator state.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Stream::from_seed(seed).rng()
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform integer in [0, bound). `bound` must be nonzero.
    #[inline]
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        // Multiply-shift rejection-free mapping; bias is < 2^-53 for the
        // small bounds used here.
        (self.next_f64() * bound as f64) as u64
    }

    /// Bernoulli draw with success probability `p`.
    #[inline]
    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard exponential via inversion.
    #[inline]
    pub fn next_exp(&mut self) -> f64 {
        -(1.0 - self.next_f64()).ln()
    }

    /// Sample an index from an explicit probability vector by inverse CDF.
    /// The vector must sum to ~1; the last index absorbs rounding slack.
    pub fn next_categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.next_f64();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}
