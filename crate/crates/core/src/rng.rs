//! Counter-based noise streams.
//!
//! Every random draw in the engine comes from a generator keyed by
//! `(seed, particle, step, role)`, so results never depend on the order in
//! which particles are processed or on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamRole {
    Slow = 0,
    Fast = 1,
    Init = 2,
    Frozen = 3,
    Sampler = 4,
    Mixing = 5,
}

impl StreamRole {
    pub fn name(self) -> &'static str {
        match self {
            StreamRole::Slow => "slow",
            StreamRole::Fast => "fast",
            StreamRole::Init => "init",
            StreamRole::Frozen => "frozen",
            StreamRole::Sampler => "sampler",
            StreamRole::Mixing => "mixing",
        }
    }
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a list of labels.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn stream(seed: u64, particle: u64, step: u64, role: StreamRole) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = derive_seed(seed, &[role as u64, particle, step]);
    for chunk in key.chunks_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Fills `out` with independent N(0, variance) draws.
#[inline]
pub fn fill_normal(rng: &mut ChaCha8Rng, variance: f64, out: &mut [f64]) {
    let sd = variance.sqrt();
    for o in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *o = sd * z;
    }
}

/// Human-readable stream-family id used in run manifests.
pub fn family_id(seed: u64, role: StreamRole) -> String {
    format!("{:016x}/{}", seed, role.name())
}
