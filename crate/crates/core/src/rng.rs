//! Counter-derived random substreams.
//!
//! Every stream used by the crate is addressed by a tuple
//! `(seed, tag, index_a, index_b)`. The tuple is folded through the
//! SplitMix64 finalizer into a 64-bit key which seeds a ChaCha8 generator.
//! Typical addresses:
//!
//! ```text
//! increments for path k      (seed, "increments", k, 0)
//! nested evaluation at node j (seed, "child",     j, 0)
//! validation samples          (seed, "validate",  0, 0)
//! ```
//!
//! Streams depend only on their address, so any subset of paths can be
//! regenerated without touching the others and results do not depend on
//! how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a of the tag bytes. Stable across platforms and releases.
fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derives a child seed from a parent seed, a module tag and two indices.
pub fn derive_seed(seed: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ tag_hash(tag));
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(32))
}

/// Generator for the stream at the given address.
pub fn stream(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, a, b))
}
