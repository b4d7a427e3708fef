//! Hashing, signatures, Merkle commitments and the OPRF group.
//!
//! Everything here is pure: the same inputs (including the seed of any
//! supplied rng) always produce the same outputs.

mod merkle;
mod oprf;
mod sig;

use std::fmt;

use sha2::{Digest as _, Sha256};

pub use merkle::{merkle_commit, merkle_verify, MerkleProof, MerkleTree, Salt};
pub use oprf::{
    hash_to_group, oprf_blind, oprf_evaluate, oprf_unblind, GroupElement, GroupScalar,
};
pub use sig::{PublicKey, SigKeyPair, Signature};

/// Errors raised while decoding or using cryptographic objects.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("malformed {what}: {detail}")]
    Decode { what: &'static str, detail: String },
    #[error("cannot commit to an empty leaf set")]
    EmptyLeafSet,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("identity element is not a valid OPRF input")]
    IdentityElement,
    #[error("zero scalar is not a valid OPRF key or blind")]
    ZeroScalar,
}

impl CryptoError {
    pub(crate) fn decode(what: &'static str, detail: impl Into<String>) -> Self {
        CryptoError::Decode {
            what,
            detail: detail.into(),
        }
    }
}

/// A SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const LEN: usize = 32;
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CryptoError::decode("digest", format!("expected 32 bytes, got {}", bytes.len())))?;
        Ok(Digest(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s.trim()).map_err(|e| CryptoError::decode("digest", e.to_string()))?;
        Self::from_slice(&bytes)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl AsRef<[u8]> for Digest {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

/// SHA-256 of `data`.
pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// SHA-256 of the concatenation of `parts`, without materializing it.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashMap;

    #[test]
    fn empty_input_digest() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        // "abc" from FIPS 180-2
        assert_eq!(
            hash(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn fixed_output_width() {
        for len in [0usize, 1, 1_000_000] {
            assert_eq!(hash(&vec![0xaa; len]).as_bytes().len(), 32);
        }
    }

    #[test]
    fn hash_parts_matches_concatenation() {
        let d = hash_parts(&[b"ab", b"", b"cdef"]);
        assert_eq!(d, hash(b"abcdef"));
    }

    #[test]
    fn distinct_corpus_has_distinct_digests() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut corpus: Vec<Vec<u8>> = (0..10_000)
            .map(|_| {
                let len = rng.gen_range(0..24);
                (0..len).map(|_| rng.gen()).collect()
            })
            .collect();
        corpus.sort();
        corpus.dedup();
        let mut seen: HashMap<Digest, &[u8]> = HashMap::new();
        for x in &corpus {
            if let Some(prev) = seen.insert(hash(x), x) {
                panic!("collision between {prev:?} and {x:?}");
            }
        }
        // equal inputs give equal outputs
        for x in corpus.iter().take(100) {
            assert_eq!(hash(x), hash(&x.clone()));
        }
    }

    #[test]
    fn hex_roundtrip_and_errors() {
        let d = hash(b"x");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        assert!(Digest::from_hex("abcd").is_err());
        assert!(Digest::from_hex("zz").is_err());
    }
}
