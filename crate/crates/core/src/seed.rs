//! Seed fan-out: every stage derives its own seed from one root seed.
//!
//! `derive(root, label)` is the first eight bytes (little endian) of
//! `SHA-256(root.to_le_bytes() || label)`.

use sha2::{Digest, Sha256};

pub fn derive(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_eq!(derive(7, "pretrain"), derive(7, "pretrain"));
        assert_ne!(derive(7, "pretrain"), derive(7, "head"));
        assert_ne!(derive(7, "pretrain"), derive(8, "pretrain"));
    }
}
