//! FNV-1a 64-bit content hashing for schema fingerprints and config hashes.
//! Stable across platforms and runs; not cryptographic.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn hex(h: u64) -> String {
    format!("{h:016x}")
}

pub fn hash_str(s: &str) -> String {
    hex(fnv1a(s.as_bytes()))
}
