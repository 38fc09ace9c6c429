//! Seed derivation.
//!
//! Every random stream in a run descends from one root seed. A stage seed is
//! `splitmix64(root ^ fnv1a(label) ^ splitmix64(index))`, where `label` names
//! the stage (`"cnn"`, `"kshape"`, `"walks"`, ...) and `index` separates
//! repeated uses (fold number, layer, restart, start node).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(root ^ fnv1a(label) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_separates_labels_and_indices() {
        let a = derive(7, "cnn", 0);
        assert_eq!(a, derive(7, "cnn", 0));
        assert_ne!(a, derive(7, "cnn", 1));
        assert_ne!(a, derive(7, "kshape", 0));
        assert_ne!(a, derive(8, "cnn", 0));
    }
}
