//! Deterministic seed derivation.
//!
//! Every randomized stage takes an explicit seed; nested stages derive
//! sub-seeds through a SplitMix64 finalizer so distinct streams never share
//! RNG state and whole runs replay bit-identically.

/// Derive an independent seed for `stream` under `base`.
pub fn derive(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_streams_yield_distinct_seeds() {
        let seeds: Vec<u64> = (0..1000).map(|i| derive(42, i)).collect();
        let unique: std::collections::HashSet<_> = seeds.iter().collect();
        assert_eq!(unique.len(), seeds.len());
    }

    #[test]
    fn derivation_is_stable() {
        assert_eq!(derive(1, 2), derive(1, 2));
        assert_ne!(derive(1, 2), derive(2, 1));
    }
}
