//! Counter-based random number streams.
//!
//! Every draw is a pure function of `(root_seed, stream_id, counter)`, so any
//! piece of the pipeline can be replayed bitwise by reconstructing its stream,
//! and independent work items can draw from disjoint streams in any order
//! (or in parallel) without coordination.

/// SplitMix64 finalizer; full-avalanche 64-bit mix.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// A replayable, splittable random stream.
///
/// Identical `(root_seed, stream_id, counter)` triples always produce
/// identical draws; distinct `stream_id`s give statistically independent
/// sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    root_seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(root_seed: u64, stream_id: u64) -> Self {
        Self {
            root_seed,
            stream_id,
            counter: 0,
        }
    }

    /// Derives an independent child stream. Children of distinct salts (or of
    /// distinct parents) do not collide in practice.
    pub fn substream(&self, salt: u64) -> RngStream {
        RngStream {
            root_seed: self.root_seed,
            stream_id: mix(self.stream_id ^ mix(salt.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        let base = mix(self.root_seed ^ mix(self.stream_id ^ 0x5851_f42d_4c95_7f2d));
        let draw = mix(base.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        draw
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() requires a non-empty range");
        // Rejection-free modulo bias is negligible for desk-scale n; use
        // 53-bit scaling instead so the draw is exact for n < 2^53.
        let u = self.next_f64();
        ((u * n as f64) as usize).min(n - 1)
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.index(items.len())]
    }

    /// Standard normal via Box–Muller; consumes exactly two draws.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Bernoulli(p).
    pub fn coin(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}
