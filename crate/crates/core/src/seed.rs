//! Stage seeds derived from the master seed by hashing, so every stage gets
//! an independent, stable stream without any bookkeeping.

use sha2::{Digest, Sha256};

/// First eight bytes (little-endian) of `sha256(master_le || stage)`.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest holds 32 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
