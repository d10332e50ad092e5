//! Deterministic random number generation.
//!
//! The generator is pinned bit-exactly so that a seed identifies one stream
//! on every platform:
//!
//! * state setup: four rounds of splitmix64 applied to the seed;
//! * stream: xoshiro256++ (`rotl(s0 + s3, 23) + s0`);
//! * uniforms: the top 53 bits, `u = (x >> 11) * 2^-53`;
//! * gaussians: Box-Muller on pairs of uniforms, `u1` shifted into `(0, 1]`
//!   so the log never sees zero. `randn` consumes exactly one pair per two
//!   output elements (one pair for a trailing odd element, sine half unused).

use super::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut sm);
        }
        if s == [0, 0, 0, 0] {
            s[0] = 1; // xoshiro must not start at the all-zero state
        }
        Self { s }
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn from_state(s: [u64; 4]) -> Self {
        Self { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by 128-bit multiply-shift. The bias is
    /// below 2^-64 * n, irrelevant for the corpus-offset ranges used here.
    pub fn next_below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// One Box-Muller pair of independent standard normals.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = 2.0 * std::f64::consts::PI * u2;
        (r * phi.cos(), r * phi.sin())
    }
}

/// I.i.d. Gaussian tensor, `mean + std * z`.
pub fn randn(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Tensor {
    assert!(std >= 0.0, "randn requires std >= 0");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() + 2 <= n {
        let (z0, z1) = rng.normal_pair();
        data.push(mean + std * z0);
        data.push(mean + std * z1);
    }
    if data.len() < n {
        let (z0, _) = rng.normal_pair();
        data.push(mean + std * z0);
    }
    Tensor::from_vec(shape, data)
}
