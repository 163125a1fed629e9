//! Seed derivation. One global seed fans out to per-component seeds by
//! hashing (seed, component tags, indices), so adding or reordering
//! components never perturbs unrelated streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a base seed, string tags, and numeric indices.
pub fn derive_seed(base: u64, tags: &[&str], indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for tag in tags {
        h.update([tag.len() as u8]);
        h.update(tag.as_bytes());
    }
    for ix in indices {
        h.update(ix.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// The one RNG used everywhere; explicit so streams are platform-stable.
pub fn rng_from(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_separated() {
        let a = derive_seed(7, &["encoder"], &[]);
        let b = derive_seed(7, &["encoder"], &[]);
        assert_eq!(a, b);
        assert_ne!(a, derive_seed(7, &["latent_wm"], &[]));
        assert_ne!(a, derive_seed(8, &["encoder"], &[]));
        assert_ne!(
            derive_seed(7, &["ep"], &[1, 2]),
            derive_seed(7, &["ep"], &[2, 1])
        );
    }

    #[test]
    fn tag_boundaries_are_unambiguous() {
        assert_ne!(
            derive_seed(0, &["ab", "c"], &[]),
            derive_seed(0, &["a", "bc"], &[])
        );
    }
}
