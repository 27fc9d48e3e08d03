//! Deterministic random numbers for every stochastic component.
//!
//! All randomness in the crate flows from one root seed through named
//! sub-streams, so any component can be re-run in isolation and two runs with
//! the same root seed are bit-identical. The derivation rule is:
//!
//! ```text
//! child_seed = splitmix64(root_seed ^ fnv1a64(label))
//! ```
//!
//! where `label` is a stable ASCII name such as `"train/pair"` or
//! `"sample/noise"`. The generator itself is xoshiro256**, whose full state
//! is four `u64` words and therefore trivial to checkpoint.

/// xoshiro256** pseudo-random generator with helpers for the distributions
/// the crate needs. State is public-by-accessor so training checkpoints can
/// persist and restore it exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

/// One round of the splitmix64 output function.
fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; used only for sub-stream derivation.
fn fnv1a64(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    /// Seed a generator. A zero-everywhere state is impossible because
    /// splitmix64 expansion never yields four zero words.
    pub fn seed_from(seed: u64) -> Self {
        let mut x = seed;
        Rng {
            s: [
                splitmix64(&mut x),
                splitmix64(&mut x),
                splitmix64(&mut x),
                splitmix64(&mut x),
            ],
        }
    }

    /// Derive an independent named sub-stream:
    /// `splitmix64(root ^ fnv1a64(label))`.
    pub fn substream(root_seed: u64, label: &str) -> Self {
        let mut x = root_seed ^ fnv1a64(label);
        let child = splitmix64(&mut x);
        Rng::seed_from(child)
    }

    /// Derive a numbered sub-stream, e.g. one per dataset clip.
    pub fn substream_indexed(root_seed: u64, label: &str, index: u64) -> Self {
        let mut x = root_seed ^ fnv1a64(label) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let child = splitmix64(&mut x);
        Rng::seed_from(child)
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// One standard Gaussian draw (Box-Muller, cosine branch).
    pub fn gaussian(&mut self) -> f64 {
        // u in (0,1] so ln(u) is finite.
        let u = 1.0 - self.next_f64();
        let v = self.next_f64();
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }

    /// Fill a slice with standard Gaussian draws. Pairs of outputs share one
    /// Box-Muller transform; an odd tail consumes a full pair and discards
    /// the sine branch, so the call sequence stays reproducible regardless of
    /// how the caller chunks its requests into slices.
    pub fn fill_gaussian_f64(&mut self, out: &mut [f64]) {
        let mut i = 0;
        while i + 1 < out.len() {
            let u = 1.0 - self.next_f64();
            let v = self.next_f64();
            let r = (-2.0 * u.ln()).sqrt();
            let a = std::f64::consts::TAU * v;
            out[i] = r * a.cos();
            out[i + 1] = r * a.sin();
            i += 2;
        }
        if i < out.len() {
            out[i] = self.gaussian();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// Full generator state, for checkpointing.
    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    /// Restore a generator from checkpointed state.
    pub fn from_state(s: [u64; 4]) -> Self {
        Rng { s }
    }
}
