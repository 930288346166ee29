//! Deterministic randomness contract.
//!
//! Every run owns one root seed. Module-level random streams are derived by a
//! fixed labeled split, so changing how many draws one module consumes never
//! perturbs the others. All streams are ChaCha8, which is portable and
//! reproducible across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The stream type handed to randomized operations.
pub type Stream = ChaCha8Rng;

/// Acquisition: initial uniform sample, maximizer restarts and perturbations.
pub const ACQUISITION: &str = "acquisition";
/// Volume estimation: rejection sampling, hit-and-run chains, replications.
pub const VOLUME: &str = "volume";
/// Observation noise injected by the harness.
pub const NOISE: &str = "noise";
/// Gaussian-process hyperparameter search and GP-UCB tie-breaking.
pub const GP: &str = "gp";

/// Derives a child seed from the root seed and a stream label.
///
/// SplitMix64 finalizer over the root seed xored with an FNV-1a hash of the
/// label. Stable by construction; never dependent on `Hash` impl details.
pub fn child_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(root ^ h)
}

/// Opens the labeled child stream for a root seed.
pub fn stream(root: u64, label: &str) -> Stream {
    ChaCha8Rng::seed_from_u64(child_seed(root, label))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn labeled_streams_are_stable_and_distinct() {
        let mut a1 = stream(7, ACQUISITION);
        let mut a2 = stream(7, ACQUISITION);
        let mut v = stream(7, VOLUME);
        let x1 = a1.next_u64();
        assert_eq!(x1, a2.next_u64());
        assert_ne!(x1, v.next_u64());
    }

    #[test]
    fn different_roots_differ() {
        assert_ne!(child_seed(1, NOISE), child_seed(2, NOISE));
    }
}
