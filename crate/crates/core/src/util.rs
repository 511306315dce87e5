//! Small internal helpers shared across modules.

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `input`.
pub(crate) fn sha256_hex(input: &[u8]) -> String {
    let digest = Sha256::digest(input);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// First 12 hex chars of SHA-256 — enough to make content-derived node ids
/// collision-free at the scale of a single case graph.
pub(crate) fn short_hash(input: &str) -> String {
    sha256_hex(input.as_bytes())[..12].to_string()
}

/// Stable 64-bit value derived from arbitrary text (platform-independent).
pub(crate) fn stable_u64(input: &str) -> u64 {
    let digest = Sha256::digest(input.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields >= 8 bytes"))
}

/// Per-case seed: mixes the run seed with a content hash of the case id so
/// results are independent of processing order.
pub(crate) fn case_seed(global_seed: u64, case_id: &str) -> u64 {
    global_seed ^ stable_u64(case_id)
}
