//! Counter-based deterministic random substreams.
//!
//! Every random draw in a federation comes from a substream keyed by
//! `(seed, domain_tag, round, client_id)`. Substreams are independent of
//! execution order and worker count, so parallel runs reproduce serial
//! runs bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; used only to spread key material.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over the domain tag's bytes.
fn hash_tag(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Returns the substream for `(seed, domain_tag, round, client_id)`.
/// Identical keys yield identical streams; any differing component yields
/// an unrelated stream.
pub fn substream(seed: u64, domain_tag: &str, round: u64, client_id: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let tag = hash_tag(domain_tag);
    let mut state = splitmix64(seed ^ 0x5851f42d4c957f2d);
    for (i, component) in [tag, round, client_id, seed].iter().enumerate() {
        state = splitmix64(state ^ component.rotate_left(i as u32 * 16 + 1));
        key[i * 8..(i + 1) * 8].copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
