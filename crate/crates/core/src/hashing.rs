//! Seeded integer mixing shared by the sketch and the hashed embedding
//! table. Splitmix64 is deterministic across platforms, which keeps every
//! artifact that embeds hashes reproducible.

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// One member of a seeded hash family: different seeds give independent
/// functions over the same keys.
pub(crate) fn seeded_hash(seed: u64, key: u64) -> u64 {
    splitmix64(seed ^ splitmix64(key))
}
