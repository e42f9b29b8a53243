//! Content hashing shared by ids and caches.

use sha2::{Digest, Sha256};

/// Field separator used when hashing several parts; cannot appear in UTF-8 text
/// produced by the normalizers.
const SEP: u8 = 0x1f;

/// Full hex SHA-256 over the parts, separated by a unit separator byte.
pub fn sha256_hex<I, S>(parts: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for (i, part) in parts.into_iter().enumerate() {
        if i > 0 {
            hasher.update([SEP]);
        }
        hasher.update(part.as_ref());
    }
    hex::encode(hasher.finalize())
}

/// Short content id (first 16 hex chars of the SHA-256).
pub fn content_id<I, S>(parts: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut full = sha256_hex(parts);
    full.truncate(16);
    full
}

/// Hash of a file's bytes, or of an empty input when the file is absent.
pub fn file_sha256(path: &std::path::Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_hex([bytes]))
}

/// Deterministic 64-bit value derived from the parts. Used wherever the code
/// needs seeded pseudo-randomness keyed by content.
pub fn hash_u64<I, S>(parts: I) -> u64
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for (i, part) in parts.into_iter().enumerate() {
        if i > 0 {
            hasher.update([SEP]);
        }
        hasher.update(part.as_ref());
    }
    let digest = hasher.finalize();
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separator_distinguishes_part_boundaries() {
        assert_ne!(sha256_hex(["ab", "c"]), sha256_hex(["a", "bc"]));
        assert_eq!(content_id(["x"]).len(), 16);
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(["abc"]),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
