use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};

use super::CryptoError;

/// Ed25519 verification key, 32 bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey(pub [u8; 32]);

/// Ed25519 signature, 64 bytes.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

/// A signing keypair. Signing is deterministic.
pub struct SigKeyPair {
    signing: SigningKey,
}

impl SigKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        SigKeyPair {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }

    pub fn from_secret_bytes(seed: &[u8; 32]) -> Self {
        SigKeyPair {
            signing: SigningKey::from_bytes(seed),
        }
    }

    /// The 32-byte seed the keypair is derived from.
    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }
}

impl fmt::Debug for SigKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigKeyPair")
            .field("public", &self.public())
            .finish_non_exhaustive()
    }
}

impl PublicKey {
    pub const LEN: usize = 32;

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| {
            CryptoError::decode("public key", format!("expected 32 bytes, got {}", bytes.len()))
        })?;
        // reject encodings that are not curve points
        VerifyingKey::from_bytes(&arr).map_err(|e| CryptoError::decode("public key", e.to_string()))?;
        Ok(PublicKey(arr))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Checks `sig` over `msg`. Malformed keys or signatures verify as false.
    pub fn verify(&self, msg: &[u8], sig: &Signature) -> bool {
        self.try_verify(msg, sig).unwrap_or(false)
    }

    /// Like [`PublicKey::verify`] but surfaces key decode failures.
    pub fn try_verify(&self, msg: &[u8], sig: &Signature) -> Result<bool, CryptoError> {
        let vk = VerifyingKey::from_bytes(&self.0)
            .map_err(|e| CryptoError::decode("public key", e.to_string()))?;
        let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
        Ok(vk.verify(msg, &sig).is_ok())
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0[..8]))
    }
}

impl Signature {
    pub const LEN: usize = 64;

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 64] = bytes.try_into().map_err(|_| {
            CryptoError::decode("signature", format!("expected 64 bytes, got {}", bytes.len()))
        })?;
        Ok(Signature(arr))
    }

    pub fn as_bytes(&self) -> &[u8; 64] {
        &self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(&self.0[..8]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sign_verify_roundtrip_and_key_mismatch() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = SigKeyPair::generate(&mut rng);
        let other = SigKeyPair::generate(&mut rng);
        let sig = kp.sign(b"transcript");
        assert!(kp.public().verify(b"transcript", &sig));
        assert!(!other.public().verify(b"transcript", &sig));
    }

    #[test]
    fn signing_is_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let kp = SigKeyPair::generate(&mut rng);
        assert_eq!(kp.sign(b"m"), kp.sign(b"m"));
    }

    #[test]
    fn any_flipped_message_bit_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let kp = SigKeyPair::generate(&mut rng);
        let msg: Vec<u8> = (0..64).map(|_| rng.gen()).collect();
        let sig = kp.sign(&msg);
        for _ in 0..100 {
            let bit = rng.gen_range(0..msg.len() * 8);
            let mut m = msg.clone();
            m[bit / 8] ^= 1 << (bit % 8);
            assert!(!kp.public().verify(&m, &sig), "bit {bit} flip accepted");
        }
    }

    #[test]
    fn malformed_encodings_are_decode_errors() {
        assert!(matches!(
            PublicKey::from_slice(&[0u8; 31]),
            Err(CryptoError::Decode { .. })
        ));
        assert!(matches!(
            Signature::from_slice(&[0u8; 63]),
            Err(CryptoError::Decode { .. })
        ));
        // y = 2 has no matching x on the curve
        let mut bad = [0u8; 32];
        bad[0] = 2;
        assert!(PublicKey::from_slice(&bad).is_err());
        assert!(!PublicKey(bad).verify(b"m", &Signature([0; 64])));
    }
}
