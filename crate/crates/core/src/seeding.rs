//! Named RNG streams.
//!
//! Every stochastic step draws from a ChaCha stream keyed by the experiment
//! seed plus a path of labels (center id, subject id, epoch, ...), so results
//! never depend on which thread ran first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, path: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for part in path {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn stream(root: u64, path: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_are_not_concatenation_ambiguous() {
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
        assert_eq!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["ab", "c"]));
        assert_ne!(derive_seed(1, &["x"]), derive_seed(2, &["x"]));
    }
}
