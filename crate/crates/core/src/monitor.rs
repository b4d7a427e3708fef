//! Security-monitor model: measured boot, enclave lifecycle and the
//! hash-chained transcript.
//!
//! PCR0 and PCR1 hold the two monitor digests. Every attested transcript's
//! running digest is extended into PCR2, which is never reset within a boot,
//! so an attestation carries the PCR2 history needed to recompute it.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::crypto::{hash, hash_parts, Digest};
use crate::tpm::{fold_extends, PcrSelection, Quote, Tpm, TpmError, QUOTE_LEN};

pub const PCR_MONITOR: usize = 0;
pub const PCR_BOOT_CONFIG: usize = 1;
pub const PCR_TRANSCRIPT: usize = 2;

/// Boot configuration measured into PCR1 when none is given.
pub const DEFAULT_BOOT_CONFIG: &[u8] = b"monitor-boot-config/v1;pcrs=0,1,2;enclaves=isolated";

/// Entries appended by [`Monitor::enclave_create`].
pub const CREATE_ENTRY_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum EntryTag {
    SmMeasurement = 0x01,
    EnclaveMeasurement = 0x02,
    InitState = 0x03,
    Input = 0x04,
    Output = 0x05,
    ServerInputCommitment = 0x06,
}

impl EntryTag {
    pub fn from_byte(b: u8) -> Option<Self> {
        use EntryTag::*;
        Some(match b {
            0x01 => SmMeasurement,
            0x02 => EnclaveMeasurement,
            0x03 => InitState,
            0x04 => Input,
            0x05 => Output,
            0x06 => ServerInputCommitment,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub tag: EntryTag,
    pub payload: Digest,
}

/// Append-only list of entries with its running digest
/// `D_i = H(D_{i-1} ‖ tag ‖ payload)`, `D_0 = 0^32`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
    digest: Digest,
}

pub fn chain_step(prev: &Digest, tag: EntryTag, payload: &Digest) -> Digest {
    hash_parts(&[prev.as_bytes(), &[tag as u8], payload.as_bytes()])
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        let mut t = Transcript::new();
        for e in entries {
            t.push(e.tag, e.payload);
        }
        t
    }

    fn push(&mut self, tag: EntryTag, payload: Digest) {
        self.digest = chain_step(&self.digest, tag, &payload);
        self.entries.push(TranscriptEntry { tag, payload });
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn running_digest(&self) -> Digest {
        self.digest
    }

    pub fn payloads(&self, tag: EntryTag) -> impl Iterator<Item = &Digest> + '_ {
        self.entries.iter().filter(move |e| e.tag == tag).map(|e| &e.payload)
    }

    /// Checks the layout every monitor-produced transcript has: two monitor
    /// digests, the enclave measurement and initial state, then only I/O and
    /// at most one commitment.
    pub fn check_structure(&self) -> Result<(), String> {
        use EntryTag::*;
        let head = [SmMeasurement, SmMeasurement, EnclaveMeasurement, InitState];
        if self.entries.len() < head.len() {
            return Err(format!("{} entries, need at least {}", self.entries.len(), head.len()));
        }
        for (i, (e, want)) in self.entries.iter().zip(head).enumerate() {
            if e.tag != want {
                return Err(format!("entry {i} is {:?}, expected {want:?}", e.tag));
            }
        }
        let mut commitments = 0;
        for (i, e) in self.entries.iter().enumerate().skip(head.len()) {
            match e.tag {
                Input | Output => {}
                ServerInputCommitment => commitments += 1,
                other => return Err(format!("entry {i} has unexpected tag {other:?}")),
            }
        }
        if commitments > 1 {
            return Err(format!("{commitments} server-input commitments"));
        }
        Ok(())
    }

    /// `count(4) ‖ (tag(1) ‖ digest(32))*`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 33 * self.entries.len());
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for e in &self.entries {
            out.push(e.tag as u8);
            out.extend_from_slice(e.payload.as_bytes());
        }
        out
    }

    /// Parses from the front of `bytes`, returning bytes consumed.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, usize), MonitorError> {
        let bad = |m: &str| MonitorError::Decode(m.to_string());
        let count = u32::from_be_bytes(bytes.get(..4).ok_or_else(|| bad("transcript header"))?.try_into().unwrap()) as usize;
        let end = count
            .checked_mul(33)
            .and_then(|x| x.checked_add(4))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("transcript truncated"))?;
        let mut t = Transcript::new();
        for chunk in bytes[4..end].chunks_exact(33) {
            let tag = EntryTag::from_byte(chunk[0]).ok_or_else(|| bad("unknown entry tag"))?;
            t.push(tag, Digest::from_slice(&chunk[1..]).unwrap());
        }
        Ok((t, end))
    }
}

/// Initial architectural state, each field a labeled 8-byte value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InitialState {
    pub entry_point: u64,
    pub stack_pointer: u64,
    pub page_table_root: u64,
    pub shared_mem_base: u64,
    pub shared_mem_len: u64,
}

impl InitialState {
    pub const ENCODED_LEN: usize = 5 * 9;

    /// `(label(1) ‖ value(8)){5}` in field order.
    pub fn encode(&self) -> [u8; Self::ENCODED_LEN] {
        let fields = [
            (b'E', self.entry_point),
            (b'S', self.stack_pointer),
            (b'P', self.page_table_root),
            (b'B', self.shared_mem_base),
            (b'L', self.shared_mem_len),
        ];
        let mut out = [0u8; Self::ENCODED_LEN];
        for (i, (label, v)) in fields.into_iter().enumerate() {
            out[9 * i] = label;
            out[9 * i + 1..9 * i + 9].copy_from_slice(&v.to_be_bytes());
        }
        out
    }

    pub fn standard() -> Self {
        InitialState {
            entry_point: 0x0040_0000,
            stack_pointer: 0x7fff_f000,
            page_table_root: 0x0010_0000,
            shared_mem_base: 0x8000_0000,
            shared_mem_len: 0x0100_0000,
        }
    }
}

/// The enclave binary (which identifies the function it computes) and its
/// initial state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveImage {
    pub binary: Vec<u8>,
    pub init: InitialState,
}

impl EnclaveImage {
    pub fn new(binary: impl Into<Vec<u8>>) -> Self {
        EnclaveImage {
            binary: binary.into(),
            init: InitialState::standard(),
        }
    }

    /// `H(binary ‖ init encoding)`; the init encoding is fixed-length so the
    /// split is unambiguous.
    pub fn measurement(&self) -> Digest {
        hash_parts(&[&self.binary, &self.init.encode()])
    }

    pub fn init_digest(&self) -> Digest {
        hash(&self.init.encode())
    }
}

/// Why a program refused to continue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbortReason {
    /// A server input or client ciphertext fell outside the expected domain.
    WellFormednessViolation,
    MalformedMessage,
    ProtocolViolation,
    /// A client message disagrees with the shape fixed by the image.
    InputMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("enclave aborted ({reason:?}): {detail}")]
pub struct EnclaveAbort {
    pub reason: AbortReason,
    pub detail: String,
}

impl EnclaveAbort {
    pub fn new(reason: AbortReason, detail: impl Into<String>) -> Self {
        EnclaveAbort {
            reason,
            detail: detail.into(),
        }
    }
}

/// Deterministic computation run inside an enclave.
pub trait EnclaveProgram: Send {
    /// Ingests the server's private input and returns the digest to commit.
    fn load_server_input(&mut self, w: &[u8]) -> Result<Digest, EnclaveAbort> {
        let _ = w;
        Err(EnclaveAbort::new(AbortReason::ProtocolViolation, "program takes no server input"))
    }

    fn handle(&mut self, input: &[u8]) -> Result<Vec<u8>, EnclaveAbort>;
}

pub type ProgramFactory = Arc<dyn Fn() -> Box<dyn EnclaveProgram> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnclaveState {
    Running,
    Aborted,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EnclaveId(pub u64);

impl fmt::Display for EnclaveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "enclave#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MonitorError {
    #[error("PCR0/PCR1 are already extended; reboot the TPM first")]
    RebootRequired,
    #[error("unknown {0}")]
    UnknownEnclave(EnclaveId),
    #[error("{0} is closed")]
    EnclaveClosed(EnclaveId),
    #[error("{0} has aborted")]
    EnclaveAborted(EnclaveId),
    #[error("transcript already holds a server-input commitment")]
    DuplicateCommitment,
    #[error("no program registered for measurement {0}")]
    UnregisteredProgram(Digest),
    #[error(transparent)]
    Abort(#[from] EnclaveAbort),
    #[error(transparent)]
    Tpm(#[from] TpmError),
    #[error("malformed encoding: {0}")]
    Decode(String),
}

struct EnclaveRecord {
    measurement: Digest,
    transcript: Transcript,
    state: EnclaveState,
    program: Option<Box<dyn EnclaveProgram>>,
    committed: bool,
}

/// Expected PCR0/PCR1 contents for a trusted monitor build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorReference {
    pub sm_digest: Digest,
    pub boot_config_digest: Digest,
}

impl MonitorReference {
    pub fn for_binary(sm_binary: &[u8], boot_config: &[u8]) -> Self {
        MonitorReference {
            sm_digest: hash(sm_binary),
            boot_config_digest: hash(boot_config),
        }
    }

    pub fn expected_pcr0(&self) -> Digest {
        fold_extends([&self.sm_digest])
    }

    pub fn expected_pcr1(&self) -> Digest {
        fold_extends([&self.boot_config_digest])
    }
}

/// Public, secret-free view of the monitor state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitorSnapshot {
    pub reference: MonitorReference,
    pub enclaves: Vec<(EnclaveId, Digest, EnclaveState, Digest)>,
    pub pcr2_history: Vec<Digest>,
}

impl MonitorSnapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.reference.sm_digest.as_bytes());
        out.extend_from_slice(self.reference.boot_config_digest.as_bytes());
        out.extend_from_slice(&(self.enclaves.len() as u32).to_be_bytes());
        for (id, m, state, d) in &self.enclaves {
            out.extend_from_slice(&id.0.to_be_bytes());
            out.extend_from_slice(m.as_bytes());
            out.push(*state as u8);
            out.extend_from_slice(d.as_bytes());
        }
        out.extend_from_slice(&(self.pcr2_history.len() as u16).to_be_bytes());
        for d in &self.pcr2_history {
            out.extend_from_slice(d.as_bytes());
        }
        out
    }
}

/// Transcript plus quote: the proof handed to the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestedTranscript {
    pub transcript: Transcript,
    /// Every digest extended into PCR2 since boot, this transcript's last.
    pub pcr2_history: Vec<Digest>,
    pub quote: Quote,
}

impl AttestedTranscript {
    /// `transcript ‖ history count(2) ‖ digests ‖ quote(231)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.transcript.to_bytes();
        out.extend_from_slice(&(self.pcr2_history.len() as u16).to_be_bytes());
        for d in &self.pcr2_history {
            out.extend_from_slice(d.as_bytes());
        }
        out.extend_from_slice(&self.quote.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MonitorError> {
        let bad = |m: &str| MonitorError::Decode(m.to_string());
        let (transcript, mut at) = Transcript::read_from(bytes)?;
        let hc = u16::from_be_bytes(bytes.get(at..at + 2).ok_or_else(|| bad("history header"))?.try_into().unwrap()) as usize;
        at += 2;
        let hist_end = at + 32 * hc;
        if bytes.len() != hist_end + QUOTE_LEN {
            return Err(bad("attested transcript has the wrong length"));
        }
        let pcr2_history = bytes[at..hist_end].chunks_exact(32).map(|c| Digest::from_slice(c).unwrap()).collect();
        let quote = Quote::from_bytes(&bytes[hist_end..]).map_err(|e| MonitorError::Decode(e.to_string()))?;
        Ok(AttestedTranscript {
            transcript,
            pcr2_history,
            quote,
        })
    }

    /// PCR2 value implied by the history.
    pub fn implied_pcr2(&self) -> Digest {
        fold_extends(&self.pcr2_history)
    }
}

/// The monitor. Owns the TPM; all operations take `&mut self`, so transcript
/// mutation and TPM access are serialized by construction.
pub struct Monitor {
    tpm: Tpm,
    reference: MonitorReference,
    programs: BTreeMap<Digest, ProgramFactory>,
    enclaves: BTreeMap<EnclaveId, EnclaveRecord>,
    next_id: u64,
    pcr2_history: Vec<Digest>,
}

impl fmt::Debug for Monitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Monitor")
            .field("reference", &self.reference)
            .field("enclaves", &self.enclaves.len())
            .field("tpm", &self.tpm)
            .finish_non_exhaustive()
    }
}

impl Monitor {
    pub fn measured_boot(tpm: Tpm, sm_binary: &[u8]) -> Result<Self, MonitorError> {
        Self::measured_boot_with_config(tpm, sm_binary, DEFAULT_BOOT_CONFIG)
    }

    pub fn measured_boot_with_config(mut tpm: Tpm, sm_binary: &[u8], boot_config: &[u8]) -> Result<Self, MonitorError> {
        if tpm.pcr_read(PCR_MONITOR)? != Digest::ZERO || tpm.pcr_read(PCR_BOOT_CONFIG)? != Digest::ZERO {
            return Err(MonitorError::RebootRequired);
        }
        let reference = MonitorReference::for_binary(sm_binary, boot_config);
        tpm.pcr_extend(PCR_MONITOR, &reference.sm_digest)?;
        tpm.pcr_extend(PCR_BOOT_CONFIG, &reference.boot_config_digest)?;
        log::debug!("monitor booted, sm digest {}", reference.sm_digest);
        Ok(Monitor {
            tpm,
            reference,
            programs: BTreeMap::new(),
            enclaves: BTreeMap::new(),
            next_id: 0,
            pcr2_history: Vec::new(),
        })
    }

    /// Hands the TPM back, e.g. to attempt a second boot on it.
    pub fn into_tpm(self) -> Tpm {
        self.tpm
    }

    pub fn tpm(&self) -> &Tpm {
        &self.tpm
    }

    pub fn reference(&self) -> MonitorReference {
        self.reference
    }

    pub fn pcr2_history(&self) -> &[Digest] {
        &self.pcr2_history
    }

    pub fn register_program(&mut self, measurement: Digest, factory: ProgramFactory) {
        self.programs.insert(measurement, factory);
    }

    pub fn enclave_create(&mut self, image: &EnclaveImage) -> EnclaveId {
        let id = EnclaveId(self.next_id);
        self.next_id += 1;
        let measurement = image.measurement();
        let mut transcript = Transcript::new();
        transcript.push(EntryTag::SmMeasurement, self.reference.sm_digest);
        transcript.push(EntryTag::SmMeasurement, self.reference.boot_config_digest);
        transcript.push(EntryTag::EnclaveMeasurement, measurement);
        transcript.push(EntryTag::InitState, image.init_digest());
        let program = self.programs.get(&measurement).map(|f| f());
        self.enclaves.insert(
            id,
            EnclaveRecord {
                measurement,
                transcript,
                state: EnclaveState::Running,
                program,
                committed: false,
            },
        );
        id
    }

    fn running(&mut self, eid: EnclaveId) -> Result<&mut EnclaveRecord, MonitorError> {
        let rec = self.enclaves.get_mut(&eid).ok_or(MonitorError::UnknownEnclave(eid))?;
        match rec.state {
            EnclaveState::Running => Ok(rec),
            EnclaveState::Aborted => Err(MonitorError::EnclaveAborted(eid)),
            EnclaveState::Closed => Err(MonitorError::EnclaveClosed(eid)),
        }
    }

    pub fn enclave_state(&self, eid: EnclaveId) -> Result<EnclaveState, MonitorError> {
        self.enclaves.get(&eid).map(|r| r.state).ok_or(MonitorError::UnknownEnclave(eid))
    }

    pub fn transcript(&self, eid: EnclaveId) -> Result<&Transcript, MonitorError> {
        self.enclaves.get(&eid).map(|r| &r.transcript).ok_or(MonitorError::UnknownEnclave(eid))
    }

    pub fn transcript_extend_input(&mut self, eid: EnclaveId, data: &[u8]) -> Result<(), MonitorError> {
        self.running(eid)?.transcript.push(EntryTag::Input, hash(data));
        Ok(())
    }

    pub fn transcript_extend_output(&mut self, eid: EnclaveId, data: &[u8]) -> Result<(), MonitorError> {
        self.running(eid)?.transcript.push(EntryTag::Output, hash(data));
        Ok(())
    }

    pub fn transcript_commit_server_input(&mut self, eid: EnclaveId, root: Digest) -> Result<(), MonitorError> {
        let rec = self.running(eid)?;
        if rec.committed {
            return Err(MonitorError::DuplicateCommitment);
        }
        rec.committed = true;
        rec.transcript.push(EntryTag::ServerInputCommitment, root);
        Ok(())
    }

    /// Passes the server's private input to the program and commits the
    /// digest it returns. The input itself is not transcribed.
    pub fn enclave_load_server_input(&mut self, eid: EnclaveId, w: &[u8]) -> Result<Digest, MonitorError> {
        let rec = self.running(eid)?;
        if rec.committed {
            return Err(MonitorError::DuplicateCommitment);
        }
        let program = rec.program.as_mut().ok_or(MonitorError::UnregisteredProgram(rec.measurement))?;
        match program.load_server_input(w) {
            Ok(root) => {
                self.transcript_commit_server_input(eid, root)?;
                Ok(root)
            }
            Err(abort) => {
                rec.state = EnclaveState::Aborted;
                Err(abort.into())
            }
        }
    }

    /// Transcribes `input`, runs the program, transcribes and returns the
    /// output. On abort the transcript ends at the INPUT entry.
    pub fn enclave_run(&mut self, eid: EnclaveId, input: &[u8]) -> Result<Vec<u8>, MonitorError> {
        let rec = self.running(eid)?;
        let measurement = rec.measurement;
        let program = rec.program.as_mut().ok_or(MonitorError::UnregisteredProgram(measurement))?;
        rec.transcript.push(EntryTag::Input, hash(input));
        match program.handle(input) {
            Ok(out) => {
                rec.transcript.push(EntryTag::Output, hash(&out));
                Ok(out)
            }
            Err(abort) => {
                log::debug!("{eid} aborted: {abort}");
                rec.state = EnclaveState::Aborted;
                Err(abort.into())
            }
        }
    }

    /// Extends PCR2 with the running digest and quotes PCR{0,1,2} under the
    /// client's nonce. Consumes exactly one TPM signature and closes the
    /// enclave.
    pub fn attest_transcript(&mut self, eid: EnclaveId, nonce: [u8; 32]) -> Result<AttestedTranscript, MonitorError> {
        let rec = self.running(eid)?;
        let transcript = rec.transcript.clone();
        rec.state = EnclaveState::Closed;
        rec.program = None;
        let d = transcript.running_digest();
        self.tpm.pcr_extend(PCR_TRANSCRIPT, &d)?;
        self.pcr2_history.push(d);
        let selection = PcrSelection::from_indices(&[PCR_MONITOR, PCR_BOOT_CONFIG, PCR_TRANSCRIPT])?;
        let quote = self.tpm.quote(selection, nonce)?;
        Ok(AttestedTranscript {
            transcript,
            pcr2_history: self.pcr2_history.clone(),
            quote,
        })
    }

    pub fn snapshot(&self) -> MonitorSnapshot {
        MonitorSnapshot {
            reference: self.reference,
            enclaves: self
                .enclaves
                .iter()
                .map(|(id, r)| (*id, r.measurement, r.state, r.transcript.running_digest()))
                .collect(),
            pcr2_history: self.pcr2_history.clone(),
        }
    }
}
