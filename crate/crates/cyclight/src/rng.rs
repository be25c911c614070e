//! Deterministic seeding utilities.
//!
//! Every random draw in the crate flows through a named substream derived
//! from a master seed, so runs replay byte-for-byte regardless of call order
//! elsewhere. The derivation is a stable FNV-1a mix — no dependence on
//! `std::hash`, which is allowed to change between compiler releases.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Stable 64-bit FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_extend(FNV_OFFSET, bytes)
}

/// Continue an FNV-1a hash with more bytes.
pub fn fnv1a_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derive an independent stream seed from a master seed, a purpose label,
/// and any number of indices (group, origin, agent, ...).
pub fn substream(master: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a_extend(FNV_OFFSET, &master.to_le_bytes());
    h = fnv1a_extend(h, label.as_bytes());
    for &i in indices {
        h = fnv1a_extend(h, &i.to_le_bytes());
    }
    h
}

/// Seeded generator for a derived stream.
pub fn stream_rng(master: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(master, label, indices))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_differ_by_label_and_index() {
        let a = substream(7, "arrivals", &[0, 1]);
        let b = substream(7, "arrivals", &[1, 0]);
        let c = substream(7, "sigma", &[0, 1]);
        let d = substream(8, "arrivals", &[0, 1]);
        assert!(a != b && a != c && a != d && b != c);
    }

    #[test]
    fn substream_is_stable() {
        // Frozen values: these feed checkpoint hashes and replay seeds, so an
        // accidental change to the mix must fail loudly.
        assert_eq!(fnv1a(b"cyclight"), 0x1446_9f88_5e55_b67a);
        assert_eq!(substream(0, "", &[]), 0xa8c7_f832_281a_39c5);
    }
}
