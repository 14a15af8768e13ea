//! Seed derivation shared by every deterministic stream in the crate.

/// One step of the splitmix64 output function.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from a parent seed and a list of
/// stream coordinates (table index, purpose tag, ...).
pub fn derive(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub const STREAM_SAMPLES: u64 = 0x5341_4d50;
pub const STREAM_PERMUTATION: u64 = 0x5045_524d;
pub const STREAM_TABLE_INIT: u64 = 0x494e_4954;
pub const STREAM_EVICTION: u64 = 0x4556_4943;
