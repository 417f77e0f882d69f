//! Counter-based random numbers with named streams.
//!
//! Every consumer derives its generator from `(seed, stream, counter)` or
//! `(seed, stream, name)`, so draws are random-access: resuming a run at step
//! `s` reproduces exactly the draws of an uninterrupted run, and adding or
//! removing one consumer (e.g. a projection head) cannot shift any other
//! stream. No generator state needs to be checkpointed.

use alloc::vec::Vec;

/// Purpose tags. Each (seed, stream, counter) triple is an independent
/// sequence; the numeric values are part of the on-disk reproducibility
/// contract and must not be reordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization, keyed by parameter name.
    ParamInit = 1,
    /// Per-step corruption noise eps.
    Noise = 2,
    /// Per-step interpolation times t.
    Timestep = 3,
    /// Per-step training batch selection.
    BatchSel = 4,
    /// Per-step label dropout for classifier-free guidance.
    LabelDrop = 5,
    /// Per-sample noise during sampling, keyed by sample index.
    SampleNoise = 6,
    /// Dataset synthesis, keyed by example index.
    DataGen = 7,
    /// Noising inputs before feature extraction in evaluations.
    EvalNoise = 8,
    /// Probe training shuffles and init.
    Probe = 9,
    /// Scratch stream for tests.
    Test = 10,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Splitmix-style generator over a derived 64-bit state.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f32>,
}

impl Rng {
    /// Generator for a `(seed, stream, counter)` triple. `counter` is the
    /// training step, sample index, or example index depending on stream.
    pub fn for_counter(seed: u64, stream: Stream, counter: u64) -> Self {
        let s = mix(seed ^ GOLDEN.wrapping_mul(stream as u64 + 1));
        Rng { state: mix(s ^ counter.wrapping_mul(0xd6e8_feb8_6659_fd93)), spare_normal: None }
    }

    /// Generator keyed by a name instead of a counter, for parameter init.
    pub fn for_name(seed: u64, stream: Stream, name: &str) -> Self {
        Self::for_counter(seed, stream, fnv1a(name.as_bytes()))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    #[inline]
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    /// always tiny relative to 2^64 so the bias is unobservable.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller; the second value of each pair is
    /// cached so consecutive draws cost one pair of uniforms.
    pub fn normal(&mut self) -> f32 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1]: guard the log.
        let u1 = (self.next_f64()).max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let th = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some((r * libm::sin(th)) as f32);
        (r * libm::cos(th)) as f32
    }

    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for v in out {
            *v = self.normal();
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f32> {
        let mut v = alloc::vec![0f32; n];
        self.fill_normal(&mut v);
        v
    }
}
