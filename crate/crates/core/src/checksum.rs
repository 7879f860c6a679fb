//! 64-bit digests used for file checksums and model fingerprints.

use sha2::{Digest, Sha256};

/// First eight bytes of the SHA-256 digest, read little-endian.
pub fn digest64(bytes: &[u8]) -> u64 {
    let full = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&full[..8]);
    u64::from_le_bytes(head)
}
