//! Verifiable FHE: homomorphic evaluation inside a monitored enclave, with
//! the attested transcript as the proof that `c_y = Eval(c_x, f)`.
//!
//! Soundness is about ciphertext identity, so verification compares digests
//! of the exact bytes the client sent and received against the transcript.
//! Decryption is only reachable through [`VerifiedOutput`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{CryptoRng, Rng, RngCore};

use crate::crypto::{hash, Digest, MerkleTree, PublicKey, Salt};
use crate::fhe::{self, Ciphertext, FheError, FheKeyPair, FheParams, FhePublicKey, Plaintext};
use crate::monitor::{
    AbortReason, AttestedTranscript, EnclaveAbort, EnclaveId, EnclaveImage, EnclaveProgram, EntryTag, Monitor,
    MonitorError, MonitorReference, MonitorSnapshot, ProgramFactory, PCR_BOOT_CONFIG, PCR_MONITOR, PCR_TRANSCRIPT,
};
use crate::tpm::{composite_digest, fold_extends, ManufacturerRoot, PcrSelection, Tpm};

/// Monitor binary used by [`vfhe_gen`] and the tooling built on it.
pub const REFERENCE_MONITOR: &[u8] = b"attested-fhe security monitor v1";

const CIRCUIT_IMAGE_PREFIX: &[u8] = b"vfhe/circuit/v1";

/// Why a proof was rejected. Checks run in declaration order and the first
/// failure is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, thiserror::Error)]
pub enum Rejection {
    #[error("attestation key is not endorsed by a trusted manufacturer")]
    UntrustedEndorsement,
    #[error("quote signature or nonce is invalid")]
    BadQuote,
    #[error("quoted monitor measurements differ from the reference")]
    MonitorMismatch,
    #[error("transcript does not match the quoted PCR2 value")]
    TranscriptMismatch,
    #[error("enclave measurement differs from the expected circuit")]
    CircuitMismatch,
    #[error("transcribed inputs differ from the messages sent")]
    InputMismatch,
    #[error("transcribed outputs differ from the messages received")]
    OutputMismatch,
    #[error("server-input commitment differs from the reference")]
    CommitmentMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VfheError {
    #[error("no circuit registered with measurement {0}")]
    UnknownCircuit(Digest),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("evaluation aborted: {0}")]
    EvalAborted(EnclaveAbort),
    #[error(transparent)]
    Monitor(MonitorError),
    #[error(transparent)]
    Fhe(#[from] FheError),
    #[error("malformed message: {0}")]
    Decode(String),
}

impl From<MonitorError> for VfheError {
    fn from(e: MonitorError) -> Self {
        match e {
            MonitorError::Abort(a) => VfheError::EvalAborted(a),
            other => VfheError::Monitor(other),
        }
    }
}

/// One circuit instruction. The accumulator starts empty; `Mac*` and
/// `AddInput` treat an empty accumulator as an encryption of zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Nop,
    Load(u32),
    AddConst(u64),
    MulConst(u64),
    Mac { input: u32, weight: u64 },
    MacServer(u32),
    AddInput(u32),
}

impl Op {
    fn encode(&self) -> [u8; 9] {
        let (code, operand) = match *self {
            Op::Nop => (0x00, 0),
            Op::Load(i) => (0x01, i as u64),
            Op::AddConst(c) => (0x02, c),
            Op::MulConst(c) => (0x03, c),
            Op::Mac { input, weight } => (0x04, (input as u64) << 32 | weight),
            Op::MacServer(i) => (0x05, i as u64),
            Op::AddInput(i) => (0x06, i as u64),
        };
        let mut out = [0u8; 9];
        out[0] = code;
        out[1..].copy_from_slice(&operand.to_be_bytes());
        out
    }

    fn decode(b: &[u8]) -> Option<Op> {
        let v = u64::from_be_bytes(b[1..9].try_into().ok()?);
        let idx = || u32::try_from(v).ok();
        Some(match b[0] {
            0x00 if v == 0 => Op::Nop,
            0x01 => Op::Load(idx()?),
            0x02 => Op::AddConst(v),
            0x03 => Op::MulConst(v),
            0x04 => Op::Mac {
                input: (v >> 32) as u32,
                weight: v & 0xffff_ffff,
            },
            0x05 => Op::MacServer(idx()?),
            0x06 => Op::AddInput(idx()?),
            _ => return None,
        })
    }
}

/// A straight-line circuit over one accumulator. Its encoding is the enclave
/// binary, so the measurement binds the computation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Circuit {
    ops: Vec<Op>,
}

impl Circuit {
    pub fn new(ops: Vec<Op>) -> Self {
        Circuit { ops }
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn identity() -> Self {
        Circuit::new(vec![Op::Load(0)])
    }

    /// `x ↦ a·x + b`.
    pub fn affine(a: u64, b: u64) -> Self {
        Circuit::new(vec![Op::Load(0), Op::MulConst(a), Op::AddConst(b)])
    }

    /// `(x_0, …, x_{k-1}) ↦ Σ w_i·x_i`.
    pub fn inner_product(weights: &[u64]) -> Self {
        Circuit::new(
            weights
                .iter()
                .enumerate()
                .map(|(i, &w)| Op::Mac { input: i as u32, weight: w })
                .collect(),
        )
    }

    /// `(x_0, …, x_{k-1}) ↦ Σ w_i·x_i` with the weights supplied as the
    /// server's committed input.
    pub fn server_inner_product(k: u32) -> Self {
        Circuit::new((0..k).map(Op::MacServer).collect())
    }

    /// `op-count(2) ‖ (opcode(1) ‖ operand(8))*`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + 9 * self.ops.len());
        out.extend_from_slice(&(self.ops.len() as u16).to_be_bytes());
        for op in &self.ops {
            out.extend_from_slice(&op.encode());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VfheError> {
        let bad = |m: &str| VfheError::Decode(format!("circuit: {m}"));
        let count = u16::from_be_bytes(bytes.get(..2).ok_or_else(|| bad("truncated"))?.try_into().unwrap()) as usize;
        if bytes.len() != 2 + 9 * count {
            return Err(bad("length does not match op count"));
        }
        let ops = bytes[2..]
            .chunks_exact(9)
            .map(|c| Op::decode(c).ok_or_else(|| bad("unknown opcode")))
            .collect::<Result<_, _>>()?;
        Ok(Circuit { ops })
    }

    /// Rejects constants outside the plaintext space.
    pub fn validate(&self, params: &FheParams) -> Result<(), VfheError> {
        let t = params.t();
        for op in &self.ops {
            let c = match *op {
                Op::AddConst(c) | Op::MulConst(c) => c,
                Op::Mac { weight, .. } => weight,
                _ => continue,
            };
            let wide_mac = matches!(op, Op::Mac { .. }) && c > u32::MAX as u64;
            if c >= t || wide_mac {
                return Err(FheError::PlaintextSpaceViolation { index: 0, value: c, t }.into());
            }
        }
        Ok(())
    }

    pub fn uses_server_input(&self) -> bool {
        self.ops.iter().any(|op| matches!(op, Op::MacServer(_)))
    }

    /// The enclave image whose binary is this circuit for `params`.
    pub fn image(&self, params: &FheParams) -> EnclaveImage {
        let mut binary = CIRCUIT_IMAGE_PREFIX.to_vec();
        binary.extend_from_slice(&params.id().to_be_bytes());
        binary.extend_from_slice(&self.to_bytes());
        EnclaveImage::new(binary)
    }

    pub fn measurement(&self, params: &FheParams) -> Digest {
        self.image(params).measurement()
    }

    /// Homomorphic evaluation. Deterministic: no randomness is drawn.
    pub fn eval(&self, params: &FheParams, inputs: &[Ciphertext], weights: Option<&[u64]>) -> Result<Ciphertext, EnclaveAbort> {
        let malformed = |m: String| EnclaveAbort::new(AbortReason::MalformedMessage, m);
        let input = |i: u32| {
            inputs
                .get(i as usize)
                .ok_or_else(|| malformed(format!("circuit reads input {i}, message has {}", inputs.len())))
        };
        let fhe_err = |e: FheError| EnclaveAbort::new(AbortReason::MalformedMessage, e.to_string());
        let mut acc: Option<Ciphertext> = None;
        let accumulate = |acc: Option<Ciphertext>, term: Ciphertext| -> Result<Ciphertext, EnclaveAbort> {
            match acc {
                None => Ok(term),
                Some(a) => fhe::add(params, &a, &term).map_err(fhe_err),
            }
        };
        for op in &self.ops {
            acc = match *op {
                Op::Nop => acc,
                Op::Load(i) => Some(input(i)?.clone()),
                Op::AddConst(c) | Op::MulConst(c) => {
                    let a = acc.ok_or_else(|| malformed("constant op on empty accumulator".into()))?;
                    let m = Plaintext::constant(params, c).map_err(fhe_err)?;
                    Some(if matches!(op, Op::AddConst(_)) {
                        fhe::add_plain(params, &a, &m).map_err(fhe_err)?
                    } else {
                        fhe::mul_plain(params, &a, &m).map_err(fhe_err)?
                    })
                }
                Op::Mac { input: i, weight } => {
                    let m = Plaintext::constant(params, weight).map_err(fhe_err)?;
                    Some(accumulate(acc, fhe::mul_plain(params, input(i)?, &m).map_err(fhe_err)?)?)
                }
                Op::MacServer(i) => {
                    let w = weights
                        .and_then(|w| w.get(i as usize))
                        .ok_or_else(|| EnclaveAbort::new(AbortReason::ProtocolViolation, format!("server weight {i} not loaded")))?;
                    let m = Plaintext::constant(params, *w).map_err(fhe_err)?;
                    Some(accumulate(acc, fhe::mul_plain(params, input(i)?, &m).map_err(fhe_err)?)?)
                }
                Op::AddInput(i) => Some(accumulate(acc, input(i)?.clone())?),
            };
        }
        acc.ok_or_else(|| EnclaveAbort::new(AbortReason::ProtocolViolation, "circuit produced no output"))
    }

    /// Plaintext reference semantics for constant-coefficient inputs.
    pub fn eval_plain(&self, t: u64, inputs: &[u64], weights: Option<&[u64]>) -> Option<u64> {
        let mul = |a: u64, b: u64| (a as u128 * b as u128 % t as u128) as u64;
        let mut acc: Option<u64> = None;
        for op in &self.ops {
            let x = |i: u32| inputs.get(i as usize).copied();
            acc = match *op {
                Op::Nop => acc,
                Op::Load(i) => Some(x(i)?),
                Op::AddConst(c) => Some((acc? + c) % t),
                Op::MulConst(c) => Some(mul(acc?, c)),
                Op::Mac { input, weight } => Some((acc.unwrap_or(0) + mul(x(input)?, weight)) % t),
                Op::MacServer(i) => Some((acc.unwrap_or(0) + mul(x(i)?, *weights?.get(i as usize)?)) % t),
                Op::AddInput(i) => Some((acc.unwrap_or(0) + x(i)?) % t),
            };
        }
        acc
    }
}

/// `count(2) ‖ ciphertexts`.
pub fn encode_ciphertexts(cts: &[Ciphertext]) -> Vec<u8> {
    let mut out = (cts.len() as u16).to_be_bytes().to_vec();
    for c in cts {
        out.extend_from_slice(&c.to_bytes());
    }
    out
}

pub fn decode_ciphertexts(params: &FheParams, bytes: &[u8]) -> Result<Vec<Ciphertext>, FheError> {
    let count = u16::from_be_bytes(
        bytes
            .get(..2)
            .ok_or_else(|| FheError::Decode("ciphertext list truncated".into()))?
            .try_into()
            .unwrap(),
    ) as usize;
    let mut at = 2;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (c, used) = Ciphertext::read_from(params, &bytes[at..])?;
        out.push(c.assume_fresh(params));
        at += used;
    }
    if at != bytes.len() {
        return Err(FheError::Decode(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok(out)
}

/// Committed server weights. Leaves are the 8-byte big-endian values; in
/// hiding mode each leaf carries a 16-byte salt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerWeights {
    pub values: Vec<u64>,
    pub salts: Option<Vec<Salt>>,
}

impl ServerWeights {
    pub fn commit<R: RngCore + CryptoRng>(values: Vec<u64>, hiding: bool, rng: &mut R) -> (Self, Digest) {
        let salts = hiding.then(|| (0..values.len()).map(|_| rng.gen()).collect());
        let w = ServerWeights { values, salts };
        let root = w.root().expect("weights are non-empty");
        (w, root)
    }

    pub fn root(&self) -> Result<Digest, EnclaveAbort> {
        let leaves: Vec<[u8; 8]> = self.values.iter().map(|v| v.to_be_bytes()).collect();
        MerkleTree::build(&leaves, self.salts.clone())
            .map(|t| t.root())
            .map_err(|e| EnclaveAbort::new(AbortReason::WellFormednessViolation, e.to_string()))
    }

    /// `count(4) ‖ values(8 each) ‖ hiding(1) ‖ salts(16 each)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = (self.values.len() as u32).to_be_bytes().to_vec();
        for v in &self.values {
            out.extend_from_slice(&v.to_be_bytes());
        }
        match &self.salts {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                for salt in s {
                    out.extend_from_slice(salt);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnclaveAbort> {
        let bad = |m: &str| EnclaveAbort::new(AbortReason::MalformedMessage, format!("server weights: {m}"));
        let count = u32::from_be_bytes(bytes.get(..4).ok_or_else(|| bad("truncated"))?.try_into().unwrap()) as usize;
        let vals_end = 4 + 8 * count;
        let flag = *bytes.get(vals_end).ok_or_else(|| bad("truncated"))?;
        let values = bytes[4..vals_end].chunks_exact(8).map(|c| u64::from_be_bytes(c.try_into().unwrap())).collect();
        let rest = &bytes[vals_end + 1..];
        let salts = match (flag, rest.len()) {
            (0, 0) => None,
            (1, l) if l == 16 * count => Some(rest.chunks_exact(16).map(|c| c.try_into().unwrap()).collect()),
            _ => return Err(bad("bad salt section")),
        };
        Ok(ServerWeights { values, salts })
    }
}

struct CircuitProgram {
    params: FheParams,
    circuit: Circuit,
    weights: Option<Vec<u64>>,
}

impl EnclaveProgram for CircuitProgram {
    fn load_server_input(&mut self, w: &[u8]) -> Result<Digest, EnclaveAbort> {
        let parsed = ServerWeights::from_bytes(w)?;
        // type check before anything else is read
        if let Err(e) = fhe::check_plaintext_space(&self.params, &parsed.values) {
            return Err(EnclaveAbort::new(AbortReason::WellFormednessViolation, e.to_string()));
        }
        let root = parsed.root()?;
        self.weights = Some(parsed.values);
        Ok(root)
    }

    fn handle(&mut self, input: &[u8]) -> Result<Vec<u8>, EnclaveAbort> {
        if self.circuit.uses_server_input() && self.weights.is_none() {
            return Err(EnclaveAbort::new(AbortReason::ProtocolViolation, "server input not committed"));
        }
        let cts = decode_ciphertexts(&self.params, input)
            .map_err(|e| EnclaveAbort::new(AbortReason::MalformedMessage, e.to_string()))?;
        let y = self.circuit.eval(&self.params, &cts, self.weights.as_deref())?;
        Ok(y.to_bytes())
    }
}

/// Public trust anchors the client checks proofs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrustAnchors {
    pub manufacturer_pk: PublicKey,
    pub monitor: MonitorReference,
}

/// Client-side record of one session: its nonce and digests of every
/// message sent and received, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSession {
    nonce: [u8; 32],
    sent: Vec<Digest>,
    received: Vec<Digest>,
}

impl ClientSession {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        ClientSession::with_nonce(rng.gen())
    }

    pub fn with_nonce(nonce: [u8; 32]) -> Self {
        ClientSession {
            nonce,
            sent: Vec::new(),
            received: Vec::new(),
        }
    }

    /// Rebuilds a session from stored digests.
    pub fn from_digests(nonce: [u8; 32], sent: Vec<Digest>, received: Vec<Digest>) -> Self {
        ClientSession { nonce, sent, received }
    }

    pub fn nonce(&self) -> [u8; 32] {
        self.nonce
    }

    pub fn record_sent(&mut self, msg: &[u8]) {
        self.sent.push(hash(msg));
    }

    pub fn record_received(&mut self, msg: &[u8]) {
        self.received.push(hash(msg));
    }

    pub fn sent(&self) -> &[Digest] {
        &self.sent
    }

    pub fn received(&self) -> &[Digest] {
        &self.received
    }
}

/// What the client expects the session to have computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expectation {
    pub circuit: Digest,
    pub commitment: Option<Digest>,
}

/// Checks an attested transcript against a client session. Returns the
/// verified running digest.
pub fn verify_session(
    anchors: &TrustAnchors,
    expect: &Expectation,
    session: &ClientSession,
    pi: &AttestedTranscript,
) -> Result<Digest, Rejection> {
    let quote = &pi.quote;
    if !quote.endorsement.verify(&anchors.manufacturer_pk) {
        return Err(Rejection::UntrustedEndorsement);
    }
    if quote.nonce != session.nonce
        || !quote.endorsement.attestation_pk.verify(&quote.message(), &quote.signature)
    {
        return Err(Rejection::BadQuote);
    }
    let want_sel = PcrSelection::from_indices(&[PCR_MONITOR, PCR_BOOT_CONFIG, PCR_TRANSCRIPT]).unwrap();
    if quote.selection != want_sel {
        return Err(Rejection::MonitorMismatch);
    }
    let pcr2 = pi.implied_pcr2();
    let expected = composite_digest(&[anchors.monitor.expected_pcr0(), anchors.monitor.expected_pcr1(), pcr2]);
    let entries = pi.transcript.entries();
    let transcribed_monitor = |i: usize| entries.get(i).filter(|e| e.tag == EntryTag::SmMeasurement).map(|e| e.payload);
    if expected != quote.composite {
        // The history folds correctly under the monitor the transcript names,
        // so the register mismatch is the monitor's.
        if let (Some(a), Some(b)) = (transcribed_monitor(0), transcribed_monitor(1)) {
            let claimed = composite_digest(&[fold_extends([&a]), fold_extends([&b]), pcr2]);
            if claimed == quote.composite {
                return Err(Rejection::MonitorMismatch);
            }
        }
        return Err(Rejection::TranscriptMismatch);
    }
    if pi.pcr2_history.last() != Some(&pi.transcript.running_digest()) || pi.transcript.check_structure().is_err() {
        return Err(Rejection::TranscriptMismatch);
    }
    if transcribed_monitor(0) != Some(anchors.monitor.sm_digest)
        || transcribed_monitor(1) != Some(anchors.monitor.boot_config_digest)
    {
        return Err(Rejection::MonitorMismatch);
    }
    if entries[2].payload != expect.circuit {
        return Err(Rejection::CircuitMismatch);
    }
    if !pi.transcript.payloads(EntryTag::Input).eq(session.sent.iter()) {
        return Err(Rejection::InputMismatch);
    }
    if !pi.transcript.payloads(EntryTag::Output).eq(session.received.iter()) {
        return Err(Rejection::OutputMismatch);
    }
    let committed = pi.transcript.payloads(EntryTag::ServerInputCommitment).next();
    if committed != expect.commitment.as_ref() {
        return Err(Rejection::CommitmentMismatch);
    }
    Ok(pi.transcript.running_digest())
}

/// Ciphertexts whose provenance has been verified. Only
/// [`ClientKeys`] verification methods construct it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedOutput {
    ciphertexts: Vec<Ciphertext>,
    transcript_digest: Digest,
}

impl VerifiedOutput {
    pub fn ciphertexts(&self) -> &[Ciphertext] {
        &self.ciphertexts
    }

    pub fn transcript_digest(&self) -> Digest {
        self.transcript_digest
    }
}

/// Client state: FHE keys (the secret key never leaves this type), trust
/// anchors, and counters used to audit decrypt gating.
pub struct ClientKeys {
    keys: FheKeyPair,
    anchors: TrustAnchors,
    decryptions: u64,
    rejections: u64,
}

impl fmt::Debug for ClientKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientKeys")
            .field("anchors", &self.anchors)
            .field("decryptions", &self.decryptions)
            .field("rejections", &self.rejections)
            .finish_non_exhaustive()
    }
}

impl ClientKeys {
    pub fn new<R: RngCore + CryptoRng>(params: &FheParams, anchors: TrustAnchors, rng: &mut R) -> Self {
        Self::from_keys(fhe::keygen(params, rng), anchors)
    }

    pub fn from_keys(keys: FheKeyPair, anchors: TrustAnchors) -> Self {
        ClientKeys {
            keys,
            anchors,
            decryptions: 0,
            rejections: 0,
        }
    }

    pub fn params(&self) -> &FheParams {
        self.keys.params()
    }

    pub fn public_key(&self) -> &FhePublicKey {
        &self.keys.public
    }

    pub fn anchors(&self) -> &TrustAnchors {
        &self.anchors
    }

    /// For persisting the client's own key file; never part of a protocol message.
    #[cfg(test)]
    pub(crate) fn secret_key(&self) -> &crate::fhe::FheSecretKey {
        &self.keys.secret
    }

    pub fn key_bytes(&self) -> Vec<u8> {
        self.keys.to_bytes()
    }

    pub fn decryption_count(&self) -> u64 {
        self.decryptions
    }

    pub fn rejection_count(&self) -> u64 {
        self.rejections
    }

    pub fn encrypt<R: RngCore + CryptoRng>(&self, m: &Plaintext, rng: &mut R) -> Result<Ciphertext, FheError> {
        fhe::encrypt(&self.keys.public, m, rng)
    }

    pub fn encrypt_value<R: RngCore + CryptoRng>(&self, x: u64, rng: &mut R) -> Result<Ciphertext, FheError> {
        self.encrypt(&Plaintext::constant(self.params(), x)?, rng)
    }

    fn tally<T>(&mut self, r: Result<T, Rejection>) -> Result<T, Rejection> {
        if r.is_err() {
            self.rejections += 1;
        }
        r
    }

    /// Verifies a whole session and wraps the ciphertexts received in it.
    /// `outputs` must be exactly the ciphertexts whose bytes were recorded.
    pub fn verify_session(
        &mut self,
        expect: &Expectation,
        session: &ClientSession,
        pi: &AttestedTranscript,
        outputs: Vec<Ciphertext>,
    ) -> Result<VerifiedOutput, Rejection> {
        let r = verify_session(&self.anchors, expect, session, pi).and_then(|d| {
            // the wrapped ciphertexts must be among the verified replies
            let received: Vec<Digest> = outputs.iter().map(|c| hash(&c.to_bytes())).collect();
            if received.iter().all(|h| session.received.contains(h)) {
                Ok(VerifiedOutput {
                    ciphertexts: outputs,
                    transcript_digest: d,
                })
            } else {
                Err(Rejection::OutputMismatch)
            }
        });
        self.tally(r)
    }

    /// As [`Self::verify_session`] for replies that each carry several
    /// ciphertexts: every message must have been recorded as received, and
    /// `decode` splits it. An undecodable reply is an output mismatch.
    pub fn verify_session_messages<F>(
        &mut self,
        expect: &Expectation,
        session: &ClientSession,
        pi: &AttestedTranscript,
        messages: &[Vec<u8>],
        decode: F,
    ) -> Result<VerifiedOutput, Rejection>
    where
        F: Fn(&[u8]) -> Result<Vec<Ciphertext>, FheError>,
    {
        let r = verify_session(&self.anchors, expect, session, pi).and_then(|d| {
            let mut ciphertexts = Vec::new();
            for m in messages {
                if !session.received.contains(&hash(m)) {
                    return Err(Rejection::OutputMismatch);
                }
                ciphertexts.extend(decode(m).map_err(|_| Rejection::OutputMismatch)?);
            }
            Ok(VerifiedOutput {
                ciphertexts,
                transcript_digest: d,
            })
        });
        self.tally(r)
    }

    /// Single-input verification: `c_x` sent in one message, `c_y` received.
    pub fn verify(
        &mut self,
        c_y: &Ciphertext,
        c_x: &Ciphertext,
        pi: &AttestedTranscript,
        nonce: [u8; 32],
        circuit: Digest,
    ) -> Result<VerifiedOutput, Rejection> {
        self.verify_with_commitment(c_y, c_x, pi, nonce, circuit, None)
    }

    pub fn verify_with_commitment(
        &mut self,
        c_y: &Ciphertext,
        c_x: &Ciphertext,
        pi: &AttestedTranscript,
        nonce: [u8; 32],
        circuit: Digest,
        reference_root: Option<Digest>,
    ) -> Result<VerifiedOutput, Rejection> {
        let mut s = ClientSession::with_nonce(nonce);
        s.record_sent(&encode_ciphertexts(std::slice::from_ref(c_x)));
        s.record_received(&c_y.to_bytes());
        let expect = Expectation {
            circuit,
            commitment: reference_root,
        };
        self.verify_session(&expect, &s, pi, vec![c_y.clone()])
    }

    /// Verifies a batch evaluated by [`ServerContext::eval_batch`].
    pub fn verify_batch(
        &mut self,
        c_ys: &[Ciphertext],
        c_xs: &[Ciphertext],
        pi: &AttestedTranscript,
        nonce: [u8; 32],
        circuit: Digest,
    ) -> Result<VerifiedOutput, Rejection> {
        let mut s = ClientSession::with_nonce(nonce);
        for (x, y) in c_xs.iter().zip(c_ys) {
            s.record_sent(&encode_ciphertexts(std::slice::from_ref(x)));
            s.record_received(&y.to_bytes());
        }
        if c_xs.len() != c_ys.len() {
            return self.tally(Err(Rejection::OutputMismatch));
        }
        let expect = Expectation { circuit, commitment: None };
        self.verify_session(&expect, &s, pi, c_ys.to_vec())
    }

    /// Decryption, reachable only with a verified output.
    pub fn decrypt(&mut self, v: &VerifiedOutput) -> Result<Vec<Plaintext>, FheError> {
        self.decryptions += 1;
        v.ciphertexts.iter().map(|c| fhe::decrypt(&self.keys.secret, c)).collect()
    }

    /// Constant coefficient of each verified ciphertext.
    pub fn decrypt_values(&mut self, v: &VerifiedOutput) -> Result<Vec<u64>, FheError> {
        Ok(self.decrypt(v)?.into_iter().map(|m| m.coeffs()[0]).collect())
    }

    /// Noise budget of each verified ciphertext.
    pub fn noise_budgets(&self, v: &VerifiedOutput) -> Result<Vec<i64>, FheError> {
        v.ciphertexts.iter().map(|c| fhe::noise_budget(&self.keys.secret, c)).collect()
    }
}

/// Server side: the booted monitor (which owns the TPM) and the registered
/// circuits. Holds no signing key itself.
pub struct ServerContext {
    monitor: Monitor,
    params: FheParams,
    images: BTreeMap<Digest, EnclaveImage>,
}

impl fmt::Debug for ServerContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerContext")
            .field("params", &self.params)
            .field("circuits", &self.images.len())
            .finish_non_exhaustive()
    }
}

impl ServerContext {
    pub fn new(monitor: Monitor, params: FheParams) -> Self {
        ServerContext {
            monitor,
            params,
            images: BTreeMap::new(),
        }
    }

    /// Boots a fresh TPM from `manufacturer` and measures the reference monitor into it.
    pub fn boot<R: RngCore + CryptoRng>(manufacturer: &ManufacturerRoot, params: FheParams, rng: &mut R) -> Self {
        let tpm = Tpm::boot(manufacturer, rng);
        let monitor = Monitor::measured_boot(tpm, REFERENCE_MONITOR).expect("fresh TPM");
        ServerContext::new(monitor, params)
    }

    pub fn params(&self) -> &FheParams {
        &self.params
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn monitor_mut(&mut self) -> &mut Monitor {
        &mut self.monitor
    }

    pub fn anchors(&self, manufacturer_pk: PublicKey) -> TrustAnchors {
        TrustAnchors {
            manufacturer_pk,
            monitor: self.monitor.reference(),
        }
    }

    pub fn snapshot(&self) -> MonitorSnapshot {
        self.monitor.snapshot()
    }

    pub fn register_circuit(&mut self, circuit: &Circuit) -> Result<Digest, VfheError> {
        circuit.validate(&self.params)?;
        let (params, c) = (self.params.clone(), circuit.clone());
        let factory: ProgramFactory = Arc::new(move || {
            Box::new(CircuitProgram {
                params: params.clone(),
                circuit: c.clone(),
                weights: None,
            })
        });
        Ok(self.register_program(circuit.image(&self.params), factory))
    }

    /// Registers an arbitrary program under its image measurement.
    pub fn register_program(&mut self, image: EnclaveImage, factory: ProgramFactory) -> Digest {
        let m = image.measurement();
        self.monitor.register_program(m, factory);
        self.images.insert(m, image);
        m
    }

    pub fn open(&mut self, circuit: &Digest) -> Result<EnclaveId, VfheError> {
        let image = self.images.get(circuit).ok_or(VfheError::UnknownCircuit(*circuit))?;
        Ok(self.monitor.enclave_create(image))
    }

    pub fn load_server_input(&mut self, eid: EnclaveId, w: &[u8]) -> Result<Digest, VfheError> {
        Ok(self.monitor.enclave_load_server_input(eid, w)?)
    }

    pub fn run(&mut self, eid: EnclaveId, msg: &[u8]) -> Result<Vec<u8>, VfheError> {
        Ok(self.monitor.enclave_run(eid, msg)?)
    }

    pub fn attest(&mut self, eid: EnclaveId, nonce: [u8; 32]) -> Result<AttestedTranscript, VfheError> {
        Ok(self.monitor.attest_transcript(eid, nonce)?)
    }

    fn run_one(&mut self, eid: EnclaveId, c_x: &Ciphertext) -> Result<Ciphertext, VfheError> {
        let out = self.run(eid, &encode_ciphertexts(std::slice::from_ref(c_x)))?;
        Ok(Ciphertext::from_bytes(&self.params, &out)?)
    }

    /// `(c_y, π_y)` for one input under one quote.
    pub fn eval(&mut self, circuit: &Digest, c_x: &Ciphertext, nonce: [u8; 32]) -> Result<(Ciphertext, AttestedTranscript), VfheError> {
        let eid = self.open(circuit)?;
        let c_y = self.run_one(eid, c_x)?;
        Ok((c_y, self.attest(eid, nonce)?))
    }

    /// One enclave and one quote for the whole batch.
    pub fn eval_batch(
        &mut self,
        circuit: &Digest,
        c_xs: &[Ciphertext],
        nonce: [u8; 32],
    ) -> Result<(Vec<Ciphertext>, AttestedTranscript), VfheError> {
        if c_xs.is_empty() {
            return Err(VfheError::EmptyBatch);
        }
        let eid = self.open(circuit)?;
        let c_ys = c_xs.iter().map(|c| self.run_one(eid, c)).collect::<Result<Vec<_>, _>>()?;
        Ok((c_ys, self.attest(eid, nonce)?))
    }

    /// Eval′: the committed server input is type-checked and committed
    /// before the client's ciphertext is read.
    pub fn eval_with_server_input(
        &mut self,
        circuit: &Digest,
        w: &ServerWeights,
        c_x: &Ciphertext,
        nonce: [u8; 32],
    ) -> Result<(Ciphertext, AttestedTranscript), VfheError> {
        let eid = self.open(circuit)?;
        self.load_server_input(eid, &w.to_bytes())?;
        let c_y = self.run_one(eid, c_x)?;
        Ok((c_y, self.attest(eid, nonce)?))
    }
}

/// Sets up a manufacturer, a server with a booted monitor, and a client
/// that trusts both. The manufacturer's signing key is dropped.
pub fn vfhe_gen<R: RngCore + CryptoRng>(params: &FheParams, rng: &mut R) -> (ClientKeys, ServerContext) {
    let manufacturer = ManufacturerRoot::generate(rng);
    let server = ServerContext::boot(&manufacturer, params.clone(), rng);
    let client = ClientKeys::new(params, server.anchors(manufacturer.public()), rng);
    (client, server)
}

#[cfg(test)]
mod tests;
