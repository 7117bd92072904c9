//! Counter-based deterministic random numbers.
//!
//! Every draw is a pure function of `(seed, stream, index)`, so work can be
//! split across scales, pixels, or threads and still produce the same bits
//! as a serial run. Streams are cheap: they are just a second key word, not
//! a stateful generator.

/// SplitMix64 finalizer. Full-avalanche mix of one word.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Keyed counter generator: a pure function from `(stream, index)` to bits.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng {
            key: mix(seed.wrapping_add(GOLDEN)),
        }
    }

    /// Raw 64 bits at `(stream, index)`.
    pub fn raw(&self, stream: u64, index: u64) -> u64 {
        let mut z = self.key ^ mix(stream.wrapping_mul(GOLDEN).wrapping_add(1));
        z = mix(z.wrapping_add(index.wrapping_mul(GOLDEN)));
        mix(z ^ GOLDEN)
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    pub fn uniform(&self, stream: u64, index: u64) -> f64 {
        (self.raw(stream, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller. Consumes two counter slots per draw
    /// but exposes a single index so callers can address draws per pixel.
    pub fn normal(&self, stream: u64, index: u64) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.raw(stream, 2 * index) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.raw(stream, 2 * index + 1) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Sequential view over one stream, for code that wants draw-after-draw.
    pub fn sequence(&self, stream: u64) -> SeqRng {
        SeqRng {
            rng: *self,
            stream,
            counter: 0,
        }
    }
}

/// Stateful walk along a single stream of a [`CounterRng`].
#[derive(Debug, Clone)]
pub struct SeqRng {
    rng: CounterRng,
    stream: u64,
    counter: u64,
}

impl SeqRng {
    pub fn next_u64(&mut self) -> u64 {
        let v = self.rng.raw(self.stream, self.counter);
        self.counter += 1;
        v
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[0, n)` via the multiply-shift range map.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}
