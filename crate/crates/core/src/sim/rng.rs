//! Counter-based Gaussian noise.
//!
//! Every draw is addressed by `(seed, domain, stream, position)`: the ChaCha8 key is
//! built from `seed` and `domain`, the stream id is the path index and the word
//! position is `step * words_per_step`. Any increment can therefore be regenerated in
//! isolation, which is what makes anchor coupling, thread-count independence and the
//! variational replay work.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Key domain for Brownian increments.
pub const DOMAIN_BROWNIAN: u64 = 0x6272_6f77_6e69_616e;
/// Key domain for checker sampling (directions, uniform points, shifts).
pub const DOMAIN_SAMPLING: u64 = 0x7361_6d70_6c69_6e67;
/// Key domain for bootstrap resampling.
pub const DOMAIN_BOOTSTRAP: u64 = 0x626f_6f74_7374_7261;

/// A ChaCha8 generator keyed by `(seed, domain)` on stream `stream`.
pub fn keyed_rng(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Uniform on `(0, 1]` from the top 53 bits.
#[inline]
pub fn open_unit(u: u64) -> f64 {
    ((u >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform on `[0, 1)` from the top 53 bits.
#[inline]
pub fn half_open_unit(u: u64) -> f64 {
    (u >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One Box–Muller pair from two 64-bit words.
#[inline]
pub fn box_muller(a: u64, b: u64) -> (f64, f64) {
    let r = (-2.0 * open_unit(a).ln()).sqrt();
    let theta = std::f64::consts::TAU * half_open_unit(b);
    let (s, c) = theta.sin_cos();
    (r * c, r * s)
}

/// Fills `out` with standard normals. Always consumes `4 * ceil(n/2)` words.
pub fn fill_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let mut chunks = out.chunks_mut(2);
    for pair in &mut chunks {
        let (z0, z1) = box_muller(rng.next_u64(), rng.next_u64());
        pair[0] = z0;
        if pair.len() > 1 {
            pair[1] = z1;
        }
    }
}

/// 32-bit words consumed per step for `m` noise coordinates.
pub fn words_per_step(m: usize) -> u128 {
    4 * m.div_ceil(2) as u128
}

/// Sequential source of Brownian increments for one path, positioned at a step.
pub struct BrownianStream {
    rng: ChaCha8Rng,
    sqrt_dt: f64,
}

impl BrownianStream {
    pub fn new(seed: u64, path: usize, dim_noise: usize, dt: f64, step: usize) -> Self {
        let mut rng = keyed_rng(seed, DOMAIN_BROWNIAN, path as u64);
        rng.set_word_pos(step as u128 * words_per_step(dim_noise));
        Self { rng, sqrt_dt: dt.sqrt() }
    }

    /// Writes `ΔW_k` for the current step into `out` and advances one step.
    pub fn next_increment(&mut self, out: &mut [f64]) {
        fill_normals(&mut self.rng, out);
        for z in out.iter_mut() {
            *z *= self.sqrt_dt;
        }
    }
}

/// `ΔW_k` for steps `from..to` of `path`, concatenated (`m` values per step).
pub fn brownian_increments(seed: u64, path: usize, dim_noise: usize, dt: f64, from: usize, to: usize) -> Vec<f64> {
    let mut stream = BrownianStream::new(seed, path, dim_noise, dt, from);
    let mut out = vec![0.0; dim_noise * to.saturating_sub(from)];
    for chunk in out.chunks_mut(dim_noise) {
        stream.next_increment(chunk);
    }
    out
}
