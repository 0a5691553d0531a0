//! Named random sub-streams derived from a single project seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Sub-stream names used across the engine.
pub const SELECTOR: &str = "selector";
pub const OPTIMIZER: &str = "optimizer";
pub const GRID_SAMPLING: &str = "grid-sampling";
pub const DENSIFY: &str = "densify";
pub const FIT_INIT: &str = "fit-init";

/// Derives an independent generator for `name` from `seed`. The same pair
/// always yields the same stream, and distinct names never share state.
pub fn substream(seed: u64, name: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    Rng::from_seed(bytes)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
