//! Software model of a discrete TPM.
//!
//! Only the pieces the attestation flow needs are modeled: an extend-only
//! bank of 24 PCRs, an attestation key endorsed by a manufacturer root, and
//! `quote`, which is the only place in the system that produces signatures.
//! Quote latency is charged to a virtual clock rather than slept.

use std::fmt;
use std::time::Duration;

use rand::{CryptoRng, RngCore};

use crate::crypto::{hash, hash_parts, CryptoError, Digest, PublicKey, SigKeyPair, Signature};

pub const PCR_COUNT: usize = 24;
pub const QUOTE_MAGIC: &[u8; 4] = b"TPMQ";
pub const QUOTE_LEN: usize = 4 + 3 + 32 + 32 + 64 + 32 + 64;

/// Default quote latency: discrete TPM signing time in microseconds.
pub const DTPM_SIGN_LATENCY_US: u64 = 195_752;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TpmError {
    #[error("PCR index {0} out of range (0..{PCR_COUNT})")]
    PcrIndexOutOfRange(usize),
    #[error("quote selection is empty")]
    EmptySelection,
    #[error(transparent)]
    Decode(#[from] CryptoError),
}

/// Why a quote failed verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum QuoteRejection {
    #[error("attestation key is not endorsed by the trusted manufacturer")]
    UntrustedEndorsement,
    #[error("claimed PCR values do not match the quoted composite digest")]
    CompositeMismatch,
    #[error("quote nonce does not match the verifier's nonce")]
    NonceMismatch,
    #[error("quote signature is invalid")]
    BadSignature,
}

/// Fixed per-quote delay, charged once per signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyModel {
    pub quote_us: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            quote_us: DTPM_SIGN_LATENCY_US,
        }
    }
}

/// Simulated hardware vendor. Issues endorsement certificates.
pub struct ManufacturerRoot {
    keys: SigKeyPair,
}

impl ManufacturerRoot {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        ManufacturerRoot {
            keys: SigKeyPair::generate(rng),
        }
    }

    pub fn from_secret_bytes(seed: &[u8; 32]) -> Self {
        ManufacturerRoot {
            keys: SigKeyPair::from_secret_bytes(seed),
        }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.keys.secret_bytes()
    }

    pub fn public(&self) -> PublicKey {
        self.keys.public()
    }

    /// Signs an attestation public key.
    pub fn certify(&self, attestation_pk: &PublicKey) -> Signature {
        self.keys.sign(attestation_pk.as_bytes())
    }
}

/// Attestation public key plus the manufacturer's certificate over it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endorsement {
    pub attestation_pk: PublicKey,
    pub certificate: Signature,
}

impl Endorsement {
    pub fn verify(&self, manufacturer_pk: &PublicKey) -> bool {
        manufacturer_pk.verify(self.attestation_pk.as_bytes(), &self.certificate)
    }
}

/// A 24-bit PCR selection bitmap (bit `i % 8` of byte `i / 8`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PcrSelection(pub [u8; 3]);

impl PcrSelection {
    pub fn from_indices(indices: &[usize]) -> Result<Self, TpmError> {
        let mut bits = [0u8; 3];
        for &i in indices {
            if i >= PCR_COUNT {
                return Err(TpmError::PcrIndexOutOfRange(i));
            }
            bits[i / 8] |= 1 << (i % 8);
        }
        Ok(PcrSelection(bits))
    }

    /// Selected indices, ascending.
    pub fn indices(&self) -> Vec<usize> {
        (0..PCR_COUNT)
            .filter(|i| self.0[i / 8] & (1 << (i % 8)) != 0)
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.0 == [0; 3]
    }
}

/// Composite digest over PCR values given in ascending index order.
pub fn composite_digest(values: &[Digest]) -> Digest {
    let parts: Vec<&[u8]> = values.iter().map(|d| d.as_bytes().as_slice()).collect();
    hash_parts(&parts)
}

/// Expected register value after extending a zeroed PCR with `digests` in order.
pub fn fold_extends<'a>(digests: impl IntoIterator<Item = &'a Digest>) -> Digest {
    digests
        .into_iter()
        .fold(Digest::ZERO, |acc, d| hash_parts(&[acc.as_bytes(), d.as_bytes()]))
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Quote {
    pub selection: PcrSelection,
    pub composite: Digest,
    pub nonce: [u8; 32],
    pub signature: Signature,
    pub endorsement: Endorsement,
}

impl fmt::Debug for Quote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Quote")
            .field("selection", &self.selection.indices())
            .field("composite", &self.composite)
            .field("nonce", &hex::encode(&self.nonce[..8]))
            .finish_non_exhaustive()
    }
}

impl Quote {
    /// The signed statement: `"TPMQ" ‖ bitmap ‖ composite ‖ nonce`.
    pub fn message(&self) -> Vec<u8> {
        quote_message(&self.selection, &self.composite, &self.nonce)
    }

    pub fn to_bytes(&self) -> [u8; QUOTE_LEN] {
        let mut out = [0u8; QUOTE_LEN];
        let parts: [&[u8]; 7] = [
            QUOTE_MAGIC,
            &self.selection.0,
            self.composite.as_bytes(),
            &self.nonce,
            self.signature.as_bytes(),
            self.endorsement.attestation_pk.as_bytes(),
            self.endorsement.certificate.as_bytes(),
        ];
        let mut at = 0;
        for p in parts {
            out[at..at + p.len()].copy_from_slice(p);
            at += p.len();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TpmError> {
        if bytes.len() != QUOTE_LEN {
            return Err(CryptoError::decode("quote", format!("expected {QUOTE_LEN} bytes, got {}", bytes.len())).into());
        }
        if &bytes[0..4] != QUOTE_MAGIC {
            return Err(CryptoError::decode("quote", "bad magic").into());
        }
        Ok(Quote {
            selection: PcrSelection(bytes[4..7].try_into().unwrap()),
            composite: Digest::from_slice(&bytes[7..39])?,
            nonce: bytes[39..71].try_into().unwrap(),
            signature: Signature::from_slice(&bytes[71..135])?,
            endorsement: Endorsement {
                attestation_pk: PublicKey::from_slice(&bytes[135..167])?,
                certificate: Signature::from_slice(&bytes[167..231])?,
            },
        })
    }
}

fn quote_message(selection: &PcrSelection, composite: &Digest, nonce: &[u8; 32]) -> Vec<u8> {
    let mut m = Vec::with_capacity(71);
    m.extend_from_slice(QUOTE_MAGIC);
    m.extend_from_slice(&selection.0);
    m.extend_from_slice(composite.as_bytes());
    m.extend_from_slice(nonce);
    m
}

/// Checks a quote against the manufacturer root, the verifier's own view of
/// the selected PCR values (ascending index order) and its nonce.
pub fn verify_quote(
    manufacturer_pk: &PublicKey,
    quote: &Quote,
    claimed_pcr_values: &[Digest],
    nonce: &[u8; 32],
) -> Result<(), QuoteRejection> {
    if !quote.endorsement.verify(manufacturer_pk) {
        return Err(QuoteRejection::UntrustedEndorsement);
    }
    if quote.selection.indices().len() != claimed_pcr_values.len()
        || composite_digest(claimed_pcr_values) != quote.composite
    {
        return Err(QuoteRejection::CompositeMismatch);
    }
    if &quote.nonce != nonce {
        return Err(QuoteRejection::NonceMismatch);
    }
    if !quote
        .endorsement
        .attestation_pk
        .verify(&quote.message(), &quote.signature)
    {
        return Err(QuoteRejection::BadSignature);
    }
    Ok(())
}

pub struct Tpm {
    pcrs: [Digest; PCR_COUNT],
    attestation: SigKeyPair,
    certificate: Signature,
    latency: LatencyModel,
    realtime: bool,
    signatures: u64,
    virtual_us: u64,
}

impl fmt::Debug for Tpm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tpm")
            .field("attestation_pk", &self.attestation.public())
            .field("signatures", &self.signatures)
            .field("virtual_us", &self.virtual_us)
            .finish_non_exhaustive()
    }
}

impl Tpm {
    /// Powers on a fresh TPM: zeroed PCRs, new attestation key, certificate
    /// from `manufacturer`.
    pub fn boot<R: RngCore + CryptoRng>(manufacturer: &ManufacturerRoot, rng: &mut R) -> Self {
        let attestation = SigKeyPair::generate(rng);
        let certificate = manufacturer.certify(&attestation.public());
        Tpm {
            pcrs: [Digest::ZERO; PCR_COUNT],
            attestation,
            certificate,
            latency: LatencyModel::default(),
            realtime: false,
            signatures: 0,
            virtual_us: 0,
        }
    }

    pub fn with_latency(mut self, latency: LatencyModel) -> Self {
        self.latency = latency;
        self
    }

    /// Sleep for the modeled latency on every quote instead of only
    /// advancing the virtual clock.
    pub fn with_realtime(mut self, realtime: bool) -> Self {
        self.realtime = realtime;
        self
    }

    pub fn endorsement(&self) -> Endorsement {
        Endorsement {
            attestation_pk: self.attestation.public(),
            certificate: self.certificate,
        }
    }

    pub fn latency(&self) -> LatencyModel {
        self.latency
    }

    pub fn pcr_read(&self, index: usize) -> Result<Digest, TpmError> {
        self.pcrs
            .get(index)
            .copied()
            .ok_or(TpmError::PcrIndexOutOfRange(index))
    }

    pub fn pcr_values(&self) -> [Digest; PCR_COUNT] {
        self.pcrs
    }

    /// `PCR[index] ← H(PCR[index] ‖ d)`.
    pub fn pcr_extend(&mut self, index: usize, d: &Digest) -> Result<Digest, TpmError> {
        let reg = self
            .pcrs
            .get_mut(index)
            .ok_or(TpmError::PcrIndexOutOfRange(index))?;
        *reg = hash_parts(&[reg.as_bytes(), d.as_bytes()]);
        Ok(*reg)
    }

    pub fn quote(&mut self, selection: PcrSelection, nonce: [u8; 32]) -> Result<Quote, TpmError> {
        if selection.is_empty() {
            return Err(TpmError::EmptySelection);
        }
        let values: Vec<Digest> = selection.indices().iter().map(|&i| self.pcrs[i]).collect();
        let composite = composite_digest(&values);
        let signature = self
            .attestation
            .sign(&quote_message(&selection, &composite, &nonce));
        self.signatures += 1;
        self.virtual_us += self.latency.quote_us;
        if self.realtime {
            std::thread::sleep(Duration::from_micros(self.latency.quote_us));
        }
        Ok(Quote {
            selection,
            composite,
            nonce,
            signature,
            endorsement: self.endorsement(),
        })
    }

    /// Number of signatures produced since boot.
    pub fn signature_count(&self) -> u64 {
        self.signatures
    }

    /// Latency charged to the virtual clock since boot, in microseconds.
    pub fn virtual_time_us(&self) -> u64 {
        self.virtual_us
    }

    #[cfg(test)]
    pub(crate) fn secret_key_bytes(&self) -> [u8; 32] {
        self.attestation.secret_bytes()
    }
}

/// Measurement helper: `H(data)` as the digest extended into a PCR.
pub fn measure(data: &[u8]) -> Digest {
    hash(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn setup(seed: u64) -> (ManufacturerRoot, Tpm) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let root = ManufacturerRoot::generate(&mut rng);
        let tpm = Tpm::boot(&root, &mut rng);
        (root, tpm)
    }

    fn sel012() -> PcrSelection {
        PcrSelection::from_indices(&[0, 1, 2]).unwrap()
    }

    #[test]
    fn boot_state() {
        let (root, tpm) = setup(1);
        for i in 0..PCR_COUNT {
            assert_eq!(tpm.pcr_read(i).unwrap(), Digest::ZERO);
        }
        assert!(tpm.endorsement().verify(&root.public()));
        assert_eq!(tpm.signature_count(), 0);
    }

    #[test]
    fn boots_yield_distinct_keys() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let root = ManufacturerRoot::generate(&mut rng);
        let keys: std::collections::HashSet<_> = (0..10)
            .map(|_| Tpm::boot(&root, &mut rng).endorsement().attestation_pk)
            .collect();
        assert_eq!(keys.len(), 10);
    }

    #[test]
    fn extend_from_zero() {
        let (_, mut tpm) = setup(3);
        let d = hash(b"m");
        let mut pre = vec![0u8; 32];
        pre.extend_from_slice(d.as_bytes());
        assert_eq!(tpm.pcr_extend(4, &d).unwrap(), hash(&pre));
        assert_eq!(tpm.pcr_read(4).unwrap(), hash(&pre));
    }

    #[test]
    fn extend_order_matters() {
        let (_, mut a) = setup(4);
        let (_, mut b) = setup(4);
        let (d1, d2) = (hash(b"1"), hash(b"2"));
        a.pcr_extend(7, &d1).unwrap();
        a.pcr_extend(7, &d2).unwrap();
        b.pcr_extend(7, &d2).unwrap();
        b.pcr_extend(7, &d1).unwrap();
        assert_ne!(a.pcr_read(7).unwrap(), b.pcr_read(7).unwrap());
    }

    #[test]
    fn out_of_range_index() {
        let (_, mut tpm) = setup(5);
        assert_eq!(
            tpm.pcr_extend(24, &Digest::ZERO).unwrap_err(),
            TpmError::PcrIndexOutOfRange(24)
        );
        assert!(tpm.pcr_read(24).is_err());
        assert!(PcrSelection::from_indices(&[24]).is_err());
    }

    #[test]
    fn honest_quote_verifies_and_costs_one_signature() {
        let (root, mut tpm) = setup(6);
        tpm.pcr_extend(2, &hash(b"t")).unwrap();
        let nonce = [9u8; 32];
        let q = tpm.quote(sel012(), nonce).unwrap();
        let vals = [tpm.pcr_read(0).unwrap(), tpm.pcr_read(1).unwrap(), tpm.pcr_read(2).unwrap()];
        assert_eq!(verify_quote(&root.public(), &q, &vals, &nonce), Ok(()));
        assert_eq!(tpm.signature_count(), 1);
        assert_eq!(tpm.virtual_time_us(), DTPM_SIGN_LATENCY_US);
    }

    #[test]
    fn distinct_nonces_bind_distinct_signatures() {
        let (root, mut tpm) = setup(7);
        let vals = [Digest::ZERO; 3];
        let q1 = tpm.quote(sel012(), [1; 32]).unwrap();
        let q2 = tpm.quote(sel012(), [2; 32]).unwrap();
        assert_ne!(q1.signature, q2.signature);
        assert_eq!(verify_quote(&root.public(), &q1, &vals, &[1; 32]), Ok(()));
        assert_eq!(verify_quote(&root.public(), &q2, &vals, &[2; 32]), Ok(()));
        assert_eq!(
            verify_quote(&root.public(), &q1, &vals, &[2; 32]),
            Err(QuoteRejection::NonceMismatch)
        );
    }

    #[test]
    fn quote_goes_stale_after_extend() {
        let (root, mut tpm) = setup(8);
        let q = tpm.quote(sel012(), [0; 32]).unwrap();
        tpm.pcr_extend(1, &hash(b"later")).unwrap();
        let now = [tpm.pcr_read(0).unwrap(), tpm.pcr_read(1).unwrap(), tpm.pcr_read(2).unwrap()];
        assert_eq!(
            verify_quote(&root.public(), &q, &now, &[0; 32]),
            Err(QuoteRejection::CompositeMismatch)
        );
    }

    #[test]
    fn rogue_root_is_untrusted() {
        let (root, _) = setup(9);
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let rogue = ManufacturerRoot::generate(&mut rng);
        let mut tpm = Tpm::boot(&rogue, &mut rng);
        let q = tpm.quote(sel012(), [0; 32]).unwrap();
        assert_eq!(
            verify_quote(&root.public(), &q, &[Digest::ZERO; 3], &[0; 32]),
            Err(QuoteRejection::UntrustedEndorsement)
        );
    }

    #[test]
    fn empty_selection_rejected() {
        let (_, mut tpm) = setup(10);
        assert_eq!(
            tpm.quote(PcrSelection::default(), [0; 32]).unwrap_err(),
            TpmError::EmptySelection
        );
        assert_eq!(tpm.signature_count(), 0);
    }

    #[test]
    fn quote_does_not_touch_pcrs() {
        let (_, mut tpm) = setup(11);
        tpm.pcr_extend(0, &hash(b"x")).unwrap();
        let before = tpm.pcr_values();
        tpm.quote(sel012(), [3; 32]).unwrap();
        let _ = tpm.pcr_read(0);
        let _ = tpm.endorsement();
        assert_eq!(tpm.pcr_values(), before);
    }

    #[test]
    fn serialization_is_231_bytes_and_roundtrips() {
        let (_, mut tpm) = setup(12);
        let q = tpm.quote(sel012(), [5; 32]).unwrap();
        let bytes = q.to_bytes();
        assert_eq!(bytes.len(), 231);
        assert_eq!(&bytes[..4], b"TPMQ");
        assert_eq!(bytes[4..7], [0b0000_0111, 0, 0]);
        assert_eq!(Quote::from_bytes(&bytes).unwrap(), q);
        assert!(Quote::from_bytes(&bytes[..230]).is_err());
    }

    #[test]
    fn single_byte_flips_are_rejected() {
        let (root, mut tpm) = setup(13);
        tpm.pcr_extend(2, &hash(b"transcript")).unwrap();
        let nonce = [6u8; 32];
        let vals = [tpm.pcr_read(0).unwrap(), tpm.pcr_read(1).unwrap(), tpm.pcr_read(2).unwrap()];
        let bytes = tpm.quote(sel012(), nonce).unwrap().to_bytes();
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        for _ in 0..100 {
            let pos = rng.gen_range(0..QUOTE_LEN);
            let mut b = bytes;
            b[pos] ^= 1 << rng.gen_range(0..8);
            let ok = Quote::from_bytes(&b)
                .map(|q| verify_quote(&root.public(), &q, &vals, &nonce).is_ok())
                .unwrap_or(false);
            assert!(!ok, "flip at byte {pos} accepted");
        }
    }

    proptest! {
        #[test]
        fn extends_match_fold_oracle(seq in proptest::collection::vec(any::<[u8; 32]>(), 0..16), idx in 0usize..24) {
            let (_, mut tpm) = setup(15);
            let digests: Vec<Digest> = seq.into_iter().map(Digest).collect();
            for d in &digests {
                tpm.pcr_extend(idx, d).unwrap();
            }
            // independent oracle: explicit concatenation
            let mut acc = [0u8; 32];
            for d in &digests {
                let mut buf = acc.to_vec();
                buf.extend_from_slice(&d.0);
                acc = hash(&buf).0;
            }
            prop_assert_eq!(tpm.pcr_read(idx).unwrap(), Digest(acc));
            prop_assert_eq!(fold_extends(&digests), Digest(acc));
        }
    }
}
