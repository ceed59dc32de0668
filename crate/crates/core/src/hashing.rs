//! Stable, platform-independent hashing for seeds and audit digests.

use sha2::{Digest, Sha256};

/// Builds a SHA-256 over length-prefixed fields so that `("ab", "c")` and
/// `("a", "bc")` never collide.
#[derive(Clone, Default)]
pub struct StableHasher {
    inner: Sha256,
}

impl StableHasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Self::default();
        h.bytes(domain.as_bytes());
        h
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.inner.update((bytes.len() as u64).to_le_bytes());
        self.inner.update(bytes);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn digest(&self) -> [u8; 32] {
        self.inner.clone().finalize().into()
    }

    pub fn finish_u64(&self) -> u64 {
        let d = self.digest();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn finish_hex(&self) -> String {
        hex::encode(self.digest())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
