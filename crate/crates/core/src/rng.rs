//! Deterministic stream derivation.
//!
//! Every random stage of the pipeline draws from a ChaCha8 stream whose seed
//! is derived from the master seed plus a list of string tags (experiment id,
//! stage name, ...). Streams are therefore independent of scheduling and of
//! how many worker threads run: the same (master, tags) always yields the
//! same stream, and no stage ever shares a stream with another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(hash: u64, bytes: &[u8]) -> u64 {
    let mut h = hash;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer; decorrelates the FNV hash into a full-entropy seed.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stream seed from the master seed and a tag path.
///
/// Tags are hashed with a separator byte so that `["ab", "c"]` and
/// `["a", "bc"]` produce different seeds.
pub fn stream_seed(master: u64, tags: &[&str]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &master.to_le_bytes());
    for tag in tags {
        h = fnv1a(h, tag.as_bytes());
        h = fnv1a(h, &[0xff]);
    }
    splitmix64(h)
}

/// Derives the seed of the `index`-th numbered substream of `base`
/// (per-tree, per-candidate, per-restart streams).
pub fn indexed_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(0x517c_c1b7_2722_0a95)))
}

/// Derives a named substream of an already-derived seed.
pub fn tagged_seed(base: u64, tag: &str) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &base.to_le_bytes());
    h = fnv1a(h, tag.as_bytes());
    splitmix64(h)
}

/// ChaCha8 stream for the given master seed and tag path.
pub fn stream_rng(master: u64, tags: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, tags))
}

/// ChaCha8 stream from a raw derived seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
