//! Seed derivation.
//!
//! Every parallel work item gets its own generator seeded from the master
//! seed and the item's index path, so results never depend on how work is
//! scheduled across threads. The splitting rule is SplitMix64 applied to the
//! running state mixed with each index in turn:
//!
//! ```text
//! s_0 = splitmix(master), s_{i+1} = splitmix(s_i ^ (index_i + GOLDEN))
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and an index path.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |s, &i| splitmix64(s ^ i.wrapping_add(GOLDEN)))
}

/// Generator for the work item at `path` under `master`.
pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
