//! DH-OPRF over ristretto255, written multiplicatively in the docs:
//! the client sends `H(x)^r`, the server returns `(H(x)^r)^k`, and the
//! client strips `r` to obtain `H(x)^k`.

use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::Identity;
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha512};

use super::CryptoError;

const HASH_TO_GROUP_DST: &[u8] = b"attested-fhe/oprf/hash-to-group/v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupElement(pub(crate) RistrettoPoint);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupScalar(pub(crate) Scalar);

pub fn hash_to_group(x: &[u8]) -> GroupElement {
    let mut h = Sha512::new();
    h.update((HASH_TO_GROUP_DST.len() as u16).to_be_bytes());
    h.update(HASH_TO_GROUP_DST);
    h.update(x);
    let wide: [u8; 64] = h.finalize().into();
    GroupElement(RistrettoPoint::from_uniform_bytes(&wide))
}

/// Blinds `x` with a fresh nonzero scalar.
pub fn oprf_blind<R: RngCore + CryptoRng>(
    x: &[u8],
    rng: &mut R,
) -> Result<(GroupElement, GroupScalar), CryptoError> {
    let r = GroupScalar::random_nonzero(rng);
    let blinded = hash_to_group(x).mul(&r)?;
    Ok((blinded, r))
}

pub fn oprf_evaluate(k: &GroupScalar, e: &GroupElement) -> Result<GroupElement, CryptoError> {
    e.mul(k)
}

pub fn oprf_unblind(e: &GroupElement, r: &GroupScalar) -> Result<GroupElement, CryptoError> {
    if r.is_zero() {
        return Err(CryptoError::ZeroScalar);
    }
    e.mul(&GroupScalar(r.0.invert()))
}

impl GroupElement {
    pub const LEN: usize = 32;

    pub fn generator() -> Self {
        GroupElement(curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT)
    }

    pub fn is_identity(&self) -> bool {
        self.0 == RistrettoPoint::identity()
    }

    /// Scalar exponentiation; identity inputs and zero scalars are rejected.
    pub fn mul(&self, s: &GroupScalar) -> Result<GroupElement, CryptoError> {
        if self.is_identity() {
            return Err(CryptoError::IdentityElement);
        }
        if s.is_zero() {
            return Err(CryptoError::ZeroScalar);
        }
        Ok(GroupElement(self.0 * s.0))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.compress().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let c = CompressedRistretto::from_slice(bytes)
            .map_err(|_| CryptoError::decode("group element", "expected 32 bytes"))?;
        let p = c
            .decompress()
            .ok_or_else(|| CryptoError::decode("group element", "not a ristretto encoding"))?;
        let e = GroupElement(p);
        if e.is_identity() {
            return Err(CryptoError::IdentityElement);
        }
        Ok(e)
    }
}

impl GroupScalar {
    pub const LEN: usize = 32;

    pub fn random_nonzero<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        loop {
            let mut wide = [0u8; 64];
            rng.fill_bytes(&mut wide);
            let s = Scalar::from_bytes_mod_order_wide(&wide);
            if s != Scalar::ZERO {
                return GroupScalar(s);
            }
        }
    }

    pub fn from_u64(v: u64) -> Self {
        GroupScalar(Scalar::from(v))
    }

    pub fn is_zero(&self) -> bool {
        self.0 == Scalar::ZERO
    }

    pub fn mul(&self, other: &GroupScalar) -> GroupScalar {
        GroupScalar(self.0 * other.0)
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    /// Accepts only canonical encodings (value below the group order).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CryptoError::decode("scalar", "expected 32 bytes"))?;
        Option::<Scalar>::from(Scalar::from_canonical_bytes(arr))
            .map(GroupScalar)
            .ok_or_else(|| CryptoError::decode("scalar", "non-canonical encoding"))
    }
}
