//! Keyed random streams.
//!
//! Every random quantity in a run comes from its own ChaCha stream whose key
//! is the tuple `(seed, domain, a, b)`. Streams are never shared between
//! clients, rounds or threads, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Distinct tags keep, e.g., the channel gains of round 3
/// independent of the AWGN of round 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    ModelInit = 1,
    Fading = 2,
    Noise = 3,
    Jammer = 4,
    LocalSgd = 5,
    DataModel = 6,
    DataClient = 7,
    Split = 8,
    Probe = 9,
}

/// Build the stream for `(seed, domain, a, b)`.
///
/// The four words are laid out verbatim in the 256-bit ChaCha key, so two
/// distinct tuples never share a stream.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
