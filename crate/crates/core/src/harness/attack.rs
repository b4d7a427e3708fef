//! The malicious-server catalog and the wrapper that applies its
//! message-level behaviors to an honest server role.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{App, ServerFault, ServerRole, Verdict};
use crate::fhe::{self, FhePublicKey, Plaintext};
use crate::monitor::{AbortReason, AttestedTranscript};
use crate::vfhe::Rejection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackBehavior {
    /// Flip one byte of a ciphertext reply after the enclave produced it.
    TamperOutputCiphertext,
    /// Replace a ciphertext reply with a re-randomization of the correct one.
    ReencryptCorrectOutput,
    /// Serve from a different program image.
    SwapCircuit,
    /// Plant a value outside the plaintext space in the server input.
    MalformedDbEntry,
    /// Load an unrelated server input.
    WrongCommitment,
    /// Mutate one element of the server input and recommit it.
    RecommitModifiedSet,
    /// Answer with a proof from an earlier session.
    ReplayTranscript,
    /// Attest with a TPM whose key the manufacturer never endorsed.
    ForgeSignature,
    /// Withhold the last client message of a round from the enclave.
    DropInput,
    /// Feed the last two client messages of a round in swapped order.
    ReorderInputs,
}

impl AttackBehavior {
    pub const ALL: [AttackBehavior; 10] = [
        AttackBehavior::TamperOutputCiphertext,
        AttackBehavior::ReencryptCorrectOutput,
        AttackBehavior::SwapCircuit,
        AttackBehavior::MalformedDbEntry,
        AttackBehavior::WrongCommitment,
        AttackBehavior::RecommitModifiedSet,
        AttackBehavior::ReplayTranscript,
        AttackBehavior::ForgeSignature,
        AttackBehavior::DropInput,
        AttackBehavior::ReorderInputs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackBehavior::TamperOutputCiphertext => "TamperOutputCiphertext",
            AttackBehavior::ReencryptCorrectOutput => "ReencryptCorrectOutput",
            AttackBehavior::SwapCircuit => "SwapCircuit",
            AttackBehavior::MalformedDbEntry => "MalformedDbEntry",
            AttackBehavior::WrongCommitment => "WrongCommitment",
            AttackBehavior::RecommitModifiedSet => "RecommitModifiedSet",
            AttackBehavior::ReplayTranscript => "ReplayTranscript",
            AttackBehavior::ForgeSignature => "ForgeSignature",
            AttackBehavior::DropInput => "DropInput",
            AttackBehavior::ReorderInputs => "ReorderInputs",
        }
    }

    /// Every behavior applies to every app: the vFHE scenario uses a circuit
    /// with a committed server input.
    pub fn applies_to(&self, _app: App) -> bool {
        true
    }

    /// The verdict the client must reach.
    pub fn expected(&self) -> Verdict {
        match self {
            AttackBehavior::TamperOutputCiphertext | AttackBehavior::ReencryptCorrectOutput => {
                Verdict::Rejected(Rejection::OutputMismatch)
            }
            AttackBehavior::SwapCircuit => Verdict::Rejected(Rejection::CircuitMismatch),
            AttackBehavior::MalformedDbEntry => Verdict::Refused(AbortReason::WellFormednessViolation),
            AttackBehavior::WrongCommitment | AttackBehavior::RecommitModifiedSet => {
                Verdict::Rejected(Rejection::CommitmentMismatch)
            }
            AttackBehavior::ReplayTranscript => Verdict::Rejected(Rejection::BadQuote),
            AttackBehavior::ForgeSignature => Verdict::Rejected(Rejection::UntrustedEndorsement),
            AttackBehavior::DropInput | AttackBehavior::ReorderInputs => Verdict::Rejected(Rejection::InputMismatch),
        }
    }

    /// Needs at least two messages in the final round.
    pub fn needs_batch(&self) -> bool {
        matches!(self, AttackBehavior::DropInput | AttackBehavior::ReorderInputs)
    }
}

impl fmt::Display for AttackBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackBehavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        AttackBehavior::ALL
            .iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| format!("unknown attack behavior {s:?}"))
    }
}

/// A server role driven through the protocol, optionally misbehaving.
/// State-level behaviors (circuit, input, TPM) are set up when the role is
/// built; this wrapper applies the message-level ones.
pub struct Adversary {
    role: Box<dyn ServerRole>,
    attack: Option<AttackBehavior>,
    client_pk: Option<FhePublicKey>,
    replay: Option<AttestedTranscript>,
    rng: ChaCha20Rng,
    round: usize,
    tampered: bool,
    pub(super) stats: PhaseStats,
}

/// TPM counters charged per protocol phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseStats {
    pub open_virtual_us: u64,
    pub rounds_virtual_us: u64,
    pub finish_virtual_us: u64,
    pub signatures: u64,
}

impl PhaseStats {
    pub fn total_virtual_us(&self) -> u64 {
        self.open_virtual_us + self.rounds_virtual_us + self.finish_virtual_us
    }
}

impl Adversary {
    pub fn honest(role: Box<dyn ServerRole>) -> Self {
        Self::new(role, None, 0)
    }

    pub fn new(role: Box<dyn ServerRole>, attack: Option<AttackBehavior>, seed: u64) -> Self {
        Adversary {
            role,
            attack,
            client_pk: None,
            replay: None,
            rng: ChaCha20Rng::seed_from_u64(seed),
            round: 0,
            tampered: false,
            stats: PhaseStats::default(),
        }
    }

    /// Public key used to re-randomize replies.
    pub fn with_client_key(mut self, pk: FhePublicKey) -> Self {
        self.client_pk = Some(pk);
        self
    }

    /// Proof to hand back instead of a fresh one.
    pub fn set_replay(&mut self, pi: AttestedTranscript) {
        self.replay = Some(pi);
    }

    pub fn attack(&self) -> Option<AttackBehavior> {
        self.attack
    }

    pub fn role(&self) -> &dyn ServerRole {
        self.role.as_ref()
    }

    pub fn stats(&self) -> PhaseStats {
        self.stats
    }

    fn tpm_counters(&self) -> (u64, u64) {
        let tpm = self.role.monitor().tpm();
        (tpm.virtual_time_us(), tpm.signature_count())
    }

    fn charged<T>(&mut self, f: impl FnOnce(&mut Self) -> T, slot: fn(&mut PhaseStats) -> &mut u64) -> T {
        let (v0, s0) = self.tpm_counters();
        let out = f(self);
        let (v1, s1) = self.tpm_counters();
        *slot(&mut self.stats) += v1 - v0;
        self.stats.signatures += s1 - s0;
        out
    }

    pub(super) fn open(&mut self) -> Result<(), ServerFault> {
        self.round = 0;
        self.tampered = false;
        self.charged(|a| a.role.open(), |s| &mut s.open_virtual_us)
    }

    pub(super) fn round(&mut self, msgs: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, ServerFault> {
        self.charged(|a| a.round_inner(msgs), |s| &mut s.rounds_virtual_us)
    }

    fn round_inner(&mut self, mut msgs: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, ServerFault> {
        let n = msgs.len();
        let mut replies = match self.attack {
            Some(AttackBehavior::DropInput) if n >= 2 => {
                msgs.pop();
                let mut r = self.feed(&msgs)?;
                r.push(r[r.len() - 1].clone());
                r
            }
            Some(AttackBehavior::ReorderInputs) if n >= 2 => {
                msgs.swap(n - 2, n - 1);
                let mut r = self.feed(&msgs)?;
                r.swap(n - 2, n - 1);
                r
            }
            _ => self.feed(&msgs)?,
        };
        let app = self.role.app();
        if !self.tampered && app.round_carries_ciphertexts(self.round) {
            if let Some(first) = replies.first_mut() {
                match self.attack {
                    Some(AttackBehavior::TamperOutputCiphertext) => {
                        let last = first.len() - 1;
                        first[last] ^= 0x01;
                        self.tampered = true;
                    }
                    Some(AttackBehavior::ReencryptCorrectOutput) => {
                        *first = self.rerandomize(first)?;
                        self.tampered = true;
                    }
                    _ => {}
                }
            }
        }
        self.round += 1;
        Ok(replies)
    }

    fn feed(&mut self, msgs: &[Vec<u8>]) -> Result<Vec<Vec<u8>>, ServerFault> {
        msgs.iter().map(|m| self.role.handle(m)).collect()
    }

    /// `c + Enc(0)` for every ciphertext in the reply.
    fn rerandomize(&mut self, reply: &[u8]) -> Result<Vec<u8>, ServerFault> {
        let pk = self
            .client_pk
            .clone()
            .ok_or_else(|| ServerFault::Internal("no client key to re-encrypt under".into()))?;
        let params = self.role.params().clone();
        let internal = |e: fhe::FheError| ServerFault::Internal(e.to_string());
        let cts = self.role.app().decode_reply(&params, reply).map_err(internal)?;
        let zero = Plaintext::constant(&params, 0).map_err(internal)?;
        let fresh = cts
            .iter()
            .map(|c| fhe::add(&params, c, &fhe::encrypt(&pk, &zero, &mut self.rng)?))
            .collect::<Result<Vec<_>, _>>()
            .map_err(internal)?;
        Ok(self.role.app().encode_reply(&fresh))
    }

    pub(super) fn finish(&mut self, nonce: [u8; 32]) -> Result<AttestedTranscript, ServerFault> {
        let fresh = self.charged(|a| a.role.attest(nonce), |s| &mut s.finish_virtual_us)?;
        match (self.attack, self.replay.take()) {
            (Some(AttackBehavior::ReplayTranscript), Some(old)) => Ok(old),
            _ => Ok(fresh),
        }
    }
}
