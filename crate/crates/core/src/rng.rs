//! Reproducible random streams.
//!
//! Every stream is a ChaCha20 generator (a counter-based stream cipher, so the
//! output depends only on the 256-bit key and the stream position, on every
//! platform). Sub-streams for restarts, replicates and Monte Carlo seeds are
//! keyed by mixing the parent seed with a tag through SplitMix64.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `tag` under `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x2545_F491_4F6C_DD1D)))
}

/// Child seed for a path of tags, e.g. `&[k, restart]`.
pub fn derive_path(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(seed, |s, &t| derive_seed(s, t))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha20Rng::seed_from_u64(seed)
}
