//! Deterministic per-path random number streams.
//!
//! Each simulated path draws from its own ChaCha12 stream seeded by a
//! splitmix64 expansion of `(master seed, path index)`.  Streams therefore do
//! not depend on scheduling: simulating paths in any order, in any number of
//! worker threads, or in chunks of any size reproduces the same increments
//! bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 step: the standard 64-bit finalizer-based generator.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha12 stream for one path, a pure function of `(master, path_id)`.
pub fn path_rng(master: u64, path_id: u64) -> ChaCha12Rng {
    // Expand the pair into a full 256-bit seed so distinct paths get
    // decorrelated streams even for adjacent ids.
    let mut state = master ^ path_id.wrapping_mul(0xa076_1d64_78bd_642f);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}

/// Derived sub-seed for auxiliary ensembles (restarts, companion runs).
///
/// Distinct `tag` values give master seeds with independent-looking streams
/// while remaining reproducible from the scenario seed.
pub fn sub_seed(master: u64, tag: u64) -> u64 {
    let mut state = master.wrapping_add(tag.wrapping_mul(0xd6e8_feb8_6659_fd93));
    splitmix64(&mut state)
}
