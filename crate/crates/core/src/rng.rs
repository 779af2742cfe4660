//! Keyed, counter-based random streams.
//!
//! Every random draw in the engine comes from a ChaCha20 stream whose key is
//! assembled from an explicit tuple (seed, domain, a, b). Draws therefore depend
//! only on their keys and never on call order or thread scheduling.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Separates the key spaces of unrelated consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    BackboneInit = 1,
    AdapterInit = 2,
    Noise = 3,
    Batch = 4,
    DataCenters = 5,
    DataSamples = 6,
    LabelNoise = 7,
    FeedbackBias = 8,
    Replicate = 9,
}

/// Opens the stream identified by `(seed, domain, a, b)` on sub-stream `stream`.
pub fn keyed_stream(seed: u64, domain: Domain, a: u64, b: u64, stream: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed, e.g. for replicate runs.
pub fn derive_seed(seed: u64, domain: Domain, index: u64) -> u64 {
    keyed_stream(seed, domain, index, 0, 0).next_u64()
}

/// Uniform on (0, 1] from the top 53 bits.
#[inline]
pub fn open_unit(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform on [0, 1) from the top 53 bits.
#[inline]
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fills `out` with standard normal draws using the Box-Muller transform.
pub fn fill_standard_normal(rng: &mut impl RngCore, out: &mut [f64]) {
    let mut chunks = out.chunks_exact_mut(2);
    for pair in &mut chunks {
        let (z0, z1) = box_muller(rng);
        pair[0] = z0;
        pair[1] = z1;
    }
    if let [last] = chunks.into_remainder() {
        *last = box_muller(rng).0;
    }
}

#[inline]
fn box_muller(rng: &mut impl RngCore) -> (f64, f64) {
    let u1 = open_unit(rng);
    let u2 = unit(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Uniform integer in `0..n` by rejection; `n` must be nonzero.
pub fn below(rng: &mut impl RngCore, n: u64) -> u64 {
    debug_assert!(n > 0);
    let zone = u64::MAX - (u64::MAX - n + 1) % n;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return x % n;
        }
    }
}
