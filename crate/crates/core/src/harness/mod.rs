//! Session driver: transports, server roles, the attack catalog and the
//! amortization benchmark.
//!
//! A session is `OPEN`, then any number of rounds (`REQUEST` carrying a
//! batch of client messages, answered by one `REPLY` batch), then `FINISH`
//! carrying the client's nonce, answered by `ATTESTATION`. The server answers
//! any step with `REFUSAL` when its enclave aborts.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::{hash, Digest};
use crate::fhe::{Ciphertext, FheError, FheParams};
use crate::monitor::{AbortReason, AttestedTranscript, EnclaveAbort, EnclaveId, Monitor};
use crate::pir::{PirClient, PirDatabase, PirError, PirServer};
use crate::psi::{PsiClient, PsiError, PsiLayout, PsiServer, PsiServerSet};
use crate::tpm::{LatencyModel, ManufacturerRoot, Tpm};
use crate::vfhe::{
    decode_ciphertexts, encode_ciphertexts, Circuit, ClientKeys, ClientSession, Expectation, Op, Rejection, ServerContext,
    ServerWeights, TrustAnchors, VfheError, REFERENCE_MONITOR,
};

mod attack;
mod bench;
pub mod frame;
mod record;

pub use attack::{Adversary, AttackBehavior, PhaseStats};
pub use bench::{bench_csv, run_bench, BenchReport, BENCH_CSV_HEADER};
pub use frame::{channel_pair, loopback_listener, tcp_pair, ChannelTransport, Frame, FrameError, FrameTag, TcpTransport, Transport};
pub use record::{anchors_from_text, anchors_to_text, SessionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum App {
    Vfhe,
    Pir,
    Psi,
}

impl App {
    pub const ALL: [App; 3] = [App::Vfhe, App::Pir, App::Psi];

    /// PSI's first round is the OPRF; every other round carries ciphertexts.
    pub fn round_carries_ciphertexts(&self, round: usize) -> bool {
        !(matches!(self, App::Psi) && round == 0)
    }

    pub fn decode_reply(&self, params: &FheParams, reply: &[u8]) -> Result<Vec<Ciphertext>, FheError> {
        match self {
            App::Vfhe => Ok(vec![Ciphertext::from_bytes(params, reply)?.assume_fresh(params)]),
            App::Pir | App::Psi => decode_ciphertexts(params, reply),
        }
    }

    pub fn encode_reply(&self, cts: &[Ciphertext]) -> Vec<u8> {
        match self {
            App::Vfhe => cts[0].to_bytes(),
            App::Pir | App::Psi => encode_ciphertexts(cts),
        }
    }
}

impl fmt::Display for App {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            App::Vfhe => "vfhe",
            App::Pir => "pir",
            App::Psi => "psi",
        })
    }
}

impl FromStr for App {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "vfhe" => Ok(App::Vfhe),
            "pir" => Ok(App::Pir),
            "psi" => Ok(App::Psi),
            _ => Err(format!("unknown app {s:?}; expected vfhe, pir or psi")),
        }
    }
}

/// How a session ended, from the client's side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Accepted,
    Rejected(Rejection),
    /// The server's enclave aborted and the server sent a refusal.
    Refused(AbortReason),
    /// Verification passed but a decrypted entry failed its checksum.
    DecryptionFailure,
}

impl Verdict {
    /// Stable name of the reason code.
    pub fn code(&self) -> String {
        match self {
            Verdict::Accepted => "Accepted".into(),
            Verdict::Rejected(r) => format!("{r:?}"),
            Verdict::Refused(a) => format!("Refused({a:?})"),
            Verdict::DecryptionFailure => "DecryptionFailure".into(),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    None,
    Values(Vec<u64>),
    Entries(Vec<Vec<u8>>),
    Intersection(Vec<Vec<u8>>),
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("transport: {0}")]
    Transport(#[from] FrameError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("setup: {0}")]
    Setup(String),
}

impl From<VfheError> for HarnessError {
    fn from(e: VfheError) -> Self {
        HarnessError::Setup(e.to_string())
    }
}

impl From<PirError> for HarnessError {
    fn from(e: PirError) -> Self {
        HarnessError::Setup(e.to_string())
    }
}

impl From<PsiError> for HarnessError {
    fn from(e: PsiError) -> Self {
        HarnessError::Setup(e.to_string())
    }
}

impl From<FheError> for HarnessError {
    fn from(e: FheError) -> Self {
        HarnessError::Setup(e.to_string())
    }
}

/// Why a server step failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerFault {
    Abort(EnclaveAbort),
    Internal(String),
}

impl From<VfheError> for ServerFault {
    fn from(e: VfheError) -> Self {
        match e {
            VfheError::EvalAborted(a) => ServerFault::Abort(a),
            other => ServerFault::Internal(other.to_string()),
        }
    }
}

impl From<PirError> for ServerFault {
    fn from(e: PirError) -> Self {
        match e {
            PirError::Refused(a) => ServerFault::Abort(a),
            other => ServerFault::Internal(other.to_string()),
        }
    }
}

impl From<PsiError> for ServerFault {
    fn from(e: PsiError) -> Self {
        match e {
            PsiError::Refused(a) => ServerFault::Abort(a),
            other => ServerFault::Internal(other.to_string()),
        }
    }
}

/// The server half of a session.
pub trait ServerRole: Send {
    fn app(&self) -> App;
    fn params(&self) -> &FheParams;
    fn monitor(&self) -> &Monitor;
    /// Opens a serving enclave and loads the server input, if any.
    fn open(&mut self) -> Result<(), ServerFault>;
    fn handle(&mut self, msg: &[u8]) -> Result<Vec<u8>, ServerFault>;
    fn attest(&mut self, nonce: [u8; 32]) -> Result<AttestedTranscript, ServerFault>;
}

/// Raw vFHE: one registered circuit, optionally with committed weights.
pub struct VfheServer {
    ctx: ServerContext,
    circuit: Digest,
    weights: Option<ServerWeights>,
    enclave: Option<EnclaveId>,
}

impl VfheServer {
    pub fn new(mut ctx: ServerContext, circuit: &Circuit, weights: Option<ServerWeights>) -> Result<Self, VfheError> {
        let circuit = ctx.register_circuit(circuit)?;
        Ok(VfheServer {
            ctx,
            circuit,
            weights,
            enclave: None,
        })
    }
}

impl ServerRole for VfheServer {
    fn app(&self) -> App {
        App::Vfhe
    }

    fn params(&self) -> &FheParams {
        self.ctx.params()
    }

    fn monitor(&self) -> &Monitor {
        self.ctx.monitor()
    }

    fn open(&mut self) -> Result<(), ServerFault> {
        self.enclave = None;
        let eid = self.ctx.open(&self.circuit)?;
        if let Some(w) = &self.weights {
            self.ctx.load_server_input(eid, &w.to_bytes())?;
        }
        self.enclave = Some(eid);
        Ok(())
    }

    fn handle(&mut self, msg: &[u8]) -> Result<Vec<u8>, ServerFault> {
        let eid = self.enclave.ok_or_else(|| ServerFault::Internal("no open enclave".into()))?;
        Ok(self.ctx.run(eid, msg)?)
    }

    fn attest(&mut self, nonce: [u8; 32]) -> Result<AttestedTranscript, ServerFault> {
        let eid = self.enclave.take().ok_or_else(|| ServerFault::Internal("no open enclave".into()))?;
        Ok(self.ctx.attest(eid, nonce)?)
    }
}

impl ServerRole for PirServer {
    fn app(&self) -> App {
        App::Pir
    }

    fn params(&self) -> &FheParams {
        self.context().params()
    }

    fn monitor(&self) -> &Monitor {
        self.context().monitor()
    }

    fn open(&mut self) -> Result<(), ServerFault> {
        self.init()?;
        Ok(())
    }

    fn handle(&mut self, msg: &[u8]) -> Result<Vec<u8>, ServerFault> {
        Ok(self.answer(msg)?)
    }

    fn attest(&mut self, nonce: [u8; 32]) -> Result<AttestedTranscript, ServerFault> {
        Ok(PirServer::attest(self, nonce)?)
    }
}

impl ServerRole for PsiServer {
    fn app(&self) -> App {
        App::Psi
    }

    fn params(&self) -> &FheParams {
        self.context().params()
    }

    fn monitor(&self) -> &Monitor {
        self.context().monitor()
    }

    fn open(&mut self) -> Result<(), ServerFault> {
        self.init()?;
        Ok(())
    }

    fn handle(&mut self, msg: &[u8]) -> Result<Vec<u8>, ServerFault> {
        Ok(self.answer(msg)?)
    }

    fn attest(&mut self, nonce: [u8; 32]) -> Result<AttestedTranscript, ServerFault> {
        Ok(PsiServer::attest(self, nonce)?)
    }
}

fn reason_byte(r: AbortReason) -> u8 {
    match r {
        AbortReason::WellFormednessViolation => 1,
        AbortReason::MalformedMessage => 2,
        AbortReason::ProtocolViolation => 3,
        AbortReason::InputMismatch => 4,
    }
}

fn reason_from_byte(b: u8) -> Option<AbortReason> {
    Some(match b {
        1 => AbortReason::WellFormednessViolation,
        2 => AbortReason::MalformedMessage,
        3 => AbortReason::ProtocolViolation,
        4 => AbortReason::InputMismatch,
        _ => return None,
    })
}

const INTERNAL_FAULT: u8 = 0xff;

fn refusal(fault: &ServerFault) -> Frame {
    let (code, detail) = match fault {
        ServerFault::Abort(a) => (reason_byte(a.reason), a.detail.as_str()),
        ServerFault::Internal(m) => (INTERNAL_FAULT, m.as_str()),
    };
    let mut payload = vec![code];
    payload.extend_from_slice(detail.as_bytes());
    Frame::new(FrameTag::Refusal, payload)
}

/// Runs the server side of one session. Returns after the attestation (or
/// a refusal, or the client hanging up).
pub fn serve(t: &mut dyn Transport, adv: &mut Adversary) -> Result<(), HarnessError> {
    loop {
        let f = match t.recv() {
            Ok(f) => f,
            Err(FrameError::Closed) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let (reply, done) = match f.tag {
            FrameTag::Open => match adv.open() {
                Ok(()) => (Frame::new(FrameTag::Open, Vec::new()), false),
                Err(e) => (refusal(&e), true),
            },
            FrameTag::Request => {
                let msgs = frame::decode_batch(&f.payload)?;
                match adv.round(msgs) {
                    Ok(r) => (Frame::new(FrameTag::Reply, frame::encode_batch(&r)), false),
                    Err(e) => (refusal(&e), true),
                }
            }
            FrameTag::Finish => {
                let nonce: [u8; 32] = f
                    .payload
                    .as_slice()
                    .try_into()
                    .map_err(|_| HarnessError::Protocol("nonce must be 32 bytes".into()))?;
                match adv.finish(nonce) {
                    Ok(pi) => (Frame::new(FrameTag::Attestation, pi.to_bytes()), true),
                    Err(e) => (refusal(&e), true),
                }
            }
            other => return Err(HarnessError::Protocol(format!("unexpected {other:?} frame from client"))),
        };
        t.send(&reply)?;
        if done {
            return Ok(());
        }
    }
}

enum Stop {
    Refused(AbortReason),
    Error(HarnessError),
}

impl From<FrameError> for Stop {
    fn from(e: FrameError) -> Self {
        Stop::Error(e.into())
    }
}

/// Client end of a connection: records every message into the session.
struct Conn<'a> {
    t: &'a mut dyn Transport,
    session: ClientSession,
    replies: Vec<u8>,
}

impl<'a> Conn<'a> {
    fn new(t: &'a mut dyn Transport, nonce: [u8; 32]) -> Self {
        Conn {
            t,
            session: ClientSession::with_nonce(nonce),
            replies: Vec::new(),
        }
    }

    fn expect(&mut self, tag: FrameTag) -> Result<Vec<u8>, Stop> {
        let f = self.t.recv()?;
        if f.tag == FrameTag::Refusal {
            let code = f.payload.first().copied().unwrap_or(INTERNAL_FAULT);
            return match reason_from_byte(code) {
                Some(r) => Err(Stop::Refused(r)),
                None => Err(Stop::Error(HarnessError::Protocol(format!(
                    "server failed: {}",
                    String::from_utf8_lossy(&f.payload[1.min(f.payload.len())..])
                )))),
            };
        }
        if f.tag != tag {
            return Err(Stop::Error(HarnessError::Protocol(format!("expected {tag:?}, got {:?}", f.tag))));
        }
        Ok(f.payload)
    }

    fn open(&mut self) -> Result<(), Stop> {
        self.t.send(&Frame::new(FrameTag::Open, Vec::new()))?;
        self.expect(FrameTag::Open).map(|_| ())
    }

    fn round(&mut self, msgs: Vec<Vec<u8>>) -> Result<Vec<Vec<u8>>, Stop> {
        for m in &msgs {
            self.session.record_sent(m);
        }
        self.t.send(&Frame::new(FrameTag::Request, frame::encode_batch(&msgs)))?;
        let replies = frame::decode_batch(&self.expect(FrameTag::Reply)?)?;
        if replies.len() != msgs.len() {
            return Err(Stop::Error(HarnessError::Protocol(format!(
                "{} replies to {} messages",
                replies.len(),
                msgs.len()
            ))));
        }
        for r in &replies {
            self.session.record_received(r);
            self.replies.extend_from_slice(hash(r).as_bytes());
        }
        Ok(replies)
    }

    fn finish(&mut self) -> Result<AttestedTranscript, Stop> {
        self.t.send(&Frame::new(FrameTag::Finish, self.session.nonce().to_vec()))?;
        let bytes = self.expect(FrameTag::Attestation)?;
        AttestedTranscript::from_bytes(&bytes).map_err(|e| Stop::Error(HarnessError::Protocol(e.to_string())))
    }
}

/// Wall-clock phase timings seen by the client.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClientTimings {
    pub preprocess_ms: f64,
    pub query_ms: f64,
    pub attest_ms: f64,
}

/// What a client session produced.
#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub verdict: Verdict,
    pub output: Output,
    pub pi: Option<AttestedTranscript>,
    pub session: ClientSession,
    pub expectation: Expectation,
    /// `H(H(reply₁) ‖ H(reply₂) ‖ …)` over every reply received.
    pub replies_digest: Digest,
    pub timings: ClientTimings,
    pub bytes_on_wire: u64,
}

impl ClientOutcome {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }

    /// A self-contained record that can be re-verified offline.
    pub fn record(&self, anchors: &TrustAnchors) -> Option<SessionRecord> {
        self.pi.as_ref().map(|pi| SessionRecord {
            anchors: *anchors,
            expectation: self.expectation,
            session: self.session.clone(),
            pi: pi.clone(),
        })
    }
}

/// Raw result of the message exchange, before verification.
struct Exchange {
    result: Result<(Vec<Vec<u8>>, AttestedTranscript), AbortReason>,
    session: ClientSession,
    replies_digest: Digest,
    timings: ClientTimings,
    bytes_on_wire: u64,
}

impl Exchange {
    /// Runs `verify` on a completed exchange; a refusal short-circuits.
    fn conclude<V>(self, expectation: Expectation, verify: V) -> ClientOutcome
    where
        V: FnOnce(&ClientSession, &AttestedTranscript, &[Vec<u8>]) -> (Verdict, Output),
    {
        let (verdict, output, pi) = match self.result {
            Ok((replies, pi)) => {
                let (v, o) = verify(&self.session, &pi, &replies);
                (v, o, Some(pi))
            }
            Err(r) => (Verdict::Refused(r), Output::None, None),
        };
        ClientOutcome {
            verdict,
            output,
            pi,
            session: self.session,
            expectation,
            replies_digest: self.replies_digest,
            timings: self.timings,
            bytes_on_wire: self.bytes_on_wire,
        }
    }
}

/// Open, the app's rounds (which return the replies to verify), attestation.
fn exchange<F>(t: &mut dyn Transport, nonce: [u8; 32], rounds: F) -> Result<Exchange, HarnessError>
where
    F: FnOnce(&mut Conn<'_>) -> Result<Vec<Vec<u8>>, Stop>,
{
    let mut timings = ClientTimings::default();
    let mut conn = Conn::new(t, nonce);
    let result = (|| {
        let start = Instant::now();
        conn.open()?;
        timings.preprocess_ms = ms(start);
        let q = Instant::now();
        let replies = rounds(&mut conn)?;
        timings.query_ms = ms(q);
        let a = Instant::now();
        let pi = conn.finish()?;
        timings.attest_ms = ms(a);
        Ok((replies, pi))
    })();
    let result = match result {
        Ok(r) => Ok(r),
        Err(Stop::Refused(r)) => Err(r),
        Err(Stop::Error(e)) => return Err(e),
    };
    Ok(Exchange {
        result,
        bytes_on_wire: conn.t.bytes_on_wire(),
        replies_digest: hash(&conn.replies),
        session: conn.session,
        timings,
    })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// One round of vFHE evaluations; each element of `inputs` is one message.
pub fn vfhe_session<R: RngCore + CryptoRng>(
    t: &mut dyn Transport,
    keys: &mut ClientKeys,
    expectation: Expectation,
    inputs: &[Vec<u64>],
    rng: &mut R,
) -> Result<ClientOutcome, HarnessError> {
    let nonce = rng.gen();
    let mut msgs = Vec::with_capacity(inputs.len());
    for xs in inputs {
        let cts = xs.iter().map(|&x| keys.encrypt_value(x, rng)).collect::<Result<Vec<_>, _>>()?;
        msgs.push(encode_ciphertexts(&cts));
    }
    let params = keys.params().clone();
    let ex = exchange(t, nonce, |conn| conn.round(msgs))?;
    Ok(ex.conclude(expectation, |session, pi, replies| {
        let decode = |m: &[u8]| App::Vfhe.decode_reply(&params, m);
        match keys.verify_session_messages(&expectation, session, pi, replies, decode) {
            Ok(v) => match keys.decrypt_values(&v) {
                Ok(vals) => (Verdict::Accepted, Output::Values(vals)),
                Err(_) => (Verdict::DecryptionFailure, Output::None),
            },
            Err(r) => (Verdict::Rejected(r), Output::None),
        }
    }))
}

/// One round of PIR queries.
pub fn pir_session<R: RngCore + CryptoRng>(
    t: &mut dyn Transport,
    client: &mut PirClient,
    indices: &[usize],
    rng: &mut R,
) -> Result<ClientOutcome, HarnessError> {
    let nonce = rng.gen();
    let msgs = indices
        .iter()
        .map(|&i| client.build_query(i, rng).map(|q| q.message))
        .collect::<Result<Vec<_>, _>>()?;
    let ex = exchange(t, nonce, |conn| conn.round(msgs))?;
    Ok(ex.conclude(client.expectation(), |session, pi, replies| {
        match client.verify_and_decrypt(session, pi, replies) {
            Ok(entries) => (Verdict::Accepted, Output::Entries(entries)),
            Err(PirError::Rejected(r)) => (Verdict::Rejected(r), Output::None),
            Err(_) => (Verdict::DecryptionFailure, Output::None),
        }
    }))
}

/// OPRF round, then one round of `chunks` query messages.
pub fn psi_session<R: RngCore + CryptoRng>(
    t: &mut dyn Transport,
    client: &mut PsiClient,
    items: &[Vec<u8>],
    chunks: usize,
    rng: &mut R,
) -> Result<ClientOutcome, HarnessError> {
    let nonce = rng.gen();
    let (state, req) = client.oprf_request(items, rng)?;
    let protocol = |e: PsiError| Stop::Error(HarnessError::Protocol(e.to_string()));
    let ex = {
        let client = &*client;
        let state = &state;
        exchange(t, nonce, |conn| {
            if items.is_empty() {
                return Ok(Vec::new());
            }
            let reply = conn.round(vec![req])?.remove(0);
            let masked = client.oprf_finish(state, &reply).map_err(protocol)?;
            let per = masked.len().div_ceil(chunks.max(1));
            let msgs = masked
                .chunks(per)
                .map(|c| client.build_query(c, rng))
                .collect::<Result<Vec<_>, _>>()
                .map_err(protocol)?;
            conn.round(msgs)
        })?
    };
    Ok(ex.conclude(client.expectation(), |session, pi, replies| {
        match client.verify_and_intersect(session, pi, &state, replies) {
            Ok(found) => (Verdict::Accepted, Output::Intersection(found)),
            Err(PsiError::Rejected(r)) => (Verdict::Rejected(r), Output::None),
            Err(_) => (Verdict::DecryptionFailure, Output::None),
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Channel,
    /// Loopback TCP; port 0 picks a free port.
    Tcp(u16),
}

/// Everything needed to set up and run one deterministic session.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub app: App,
    pub params: FheParams,
    pub seed: u64,
    /// Messages in the final round: evaluations, PIR queries or PSI chunks.
    pub batch: usize,
    pub latency: LatencyModel,
    pub transport: TransportKind,
    pub pir_entries: usize,
    pub pir_entry_size: usize,
    pub psi_server_items: usize,
    pub psi_client_items: usize,
    pub psi_overlap: usize,
}

impl Scenario {
    /// Small desk-scale defaults.
    pub fn new(app: App, seed: u64) -> Self {
        Scenario {
            app,
            params: FheParams::desk(),
            seed,
            batch: 2,
            latency: LatencyModel::default(),
            transport: TransportKind::Channel,
            pir_entries: 64,
            pir_entry_size: 32,
            psi_server_items: 256,
            psi_client_items: 8,
            psi_overlap: 4,
        }
    }

    pub fn with_batch(mut self, k: usize) -> Self {
        self.batch = k;
        self
    }

    pub fn with_transport(mut self, t: TransportKind) -> Self {
        self.transport = t;
        self
    }
}

/// Boots a TPM endorsed by `manufacturer` and measures the reference
/// monitor into it.
pub fn boot_server<R: RngCore + CryptoRng>(
    manufacturer: &ManufacturerRoot,
    params: FheParams,
    latency: LatencyModel,
    rng: &mut R,
) -> Result<ServerContext, HarnessError> {
    let tpm = Tpm::boot(manufacturer, rng).with_latency(latency);
    let monitor = Monitor::measured_boot(tpm, REFERENCE_MONITOR).map_err(|e| HarnessError::Setup(e.to_string()))?;
    Ok(ServerContext::new(monitor, params))
}

const VFHE_ARITY: u32 = 2;

/// The client side and the plaintext oracle for a built scenario.
enum ClientPlan {
    Vfhe {
        keys: ClientKeys,
        expectation: Expectation,
        inputs: Vec<Vec<u64>>,
        expected: Vec<u64>,
    },
    Pir {
        client: PirClient,
        indices: Vec<usize>,
        expected: Vec<Vec<u8>>,
    },
    Psi {
        client: PsiClient,
        items: Vec<Vec<u8>>,
        expected: Vec<Vec<u8>>,
    },
}

impl ClientPlan {
    fn anchors(&self) -> TrustAnchors {
        *match self {
            ClientPlan::Vfhe { keys, .. } => keys,
            ClientPlan::Pir { client, .. } => client.keys(),
            ClientPlan::Psi { client, .. } => client.keys(),
        }
        .anchors()
    }

    fn decryptions(&self) -> u64 {
        match self {
            ClientPlan::Vfhe { keys, .. } => keys.decryption_count(),
            ClientPlan::Pir { client, .. } => client.keys().decryption_count(),
            ClientPlan::Psi { client, .. } => client.keys().decryption_count(),
        }
    }

    fn decryption_failures(&self) -> u64 {
        match self {
            ClientPlan::Pir { client, .. } => client.decryption_failures(),
            _ => 0,
        }
    }

    fn expected(&self) -> Output {
        match self {
            ClientPlan::Vfhe { expected, .. } => Output::Values(expected.clone()),
            ClientPlan::Pir { expected, .. } => Output::Entries(expected.clone()),
            ClientPlan::Psi { expected, .. } => Output::Intersection(expected.clone()),
        }
    }

    fn run<R: RngCore + CryptoRng>(&mut self, t: &mut dyn Transport, batch: usize, rng: &mut R) -> Result<ClientOutcome, HarnessError> {
        match self {
            ClientPlan::Vfhe {
                keys,
                expectation,
                inputs,
                ..
            } => vfhe_session(t, keys, *expectation, inputs, rng),
            ClientPlan::Pir { client, indices, .. } => pir_session(t, client, indices, rng),
            ClientPlan::Psi { client, items, .. } => psi_session(t, client, items, batch, rng),
        }
    }
}

fn random_bytes<R: RngCore>(rng: &mut R, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    rng.fill_bytes(&mut v);
    v
}

fn psi_item<R: RngCore>(rng: &mut R) -> Vec<u8> {
    format!("item-{:016x}", rng.next_u64()).into_bytes()
}

/// Builds both sides of a scenario, with the attack's state-level changes
/// applied to the server.
fn build(s: &Scenario, attack: Option<AttackBehavior>) -> Result<(ClientPlan, Adversary), HarnessError> {
    let mut rng = ChaCha20Rng::seed_from_u64(s.seed);
    let p = &s.params;
    let manufacturer = ManufacturerRoot::generate(&mut rng);
    let rogue = ManufacturerRoot::generate(&mut rng);
    let signer = if attack == Some(AttackBehavior::ForgeSignature) {
        &rogue
    } else {
        &manufacturer
    };
    let ctx = boot_server(signer, p.clone(), s.latency, &mut rng)?;
    let anchors = ctx.anchors(manufacturer.public());
    let keys = ClientKeys::new(p, anchors, &mut rng);
    let pk = keys.public_key().clone();
    let batch = if attack.is_some_and(|a| a.needs_batch()) {
        s.batch.max(2)
    } else {
        s.batch.max(1)
    };
    let t = p.t();

    let (plan, role): (ClientPlan, Box<dyn ServerRole>) = match s.app {
        App::Vfhe => {
            let circuit = Circuit::server_inner_product(VFHE_ARITY);
            let w: Vec<u64> = (0..VFHE_ARITY).map(|_| rng.gen_range(0..t)).collect();
            let (honest, root) = ServerWeights::commit(w.clone(), true, &mut rng);
            let served = match attack {
                Some(AttackBehavior::MalformedDbEntry) => {
                    let mut bad = w.clone();
                    bad[0] = t;
                    ServerWeights::commit(bad, true, &mut rng).0
                }
                Some(AttackBehavior::WrongCommitment) => {
                    ServerWeights::commit((0..VFHE_ARITY).map(|_| rng.gen_range(0..t)).collect(), true, &mut rng).0
                }
                Some(AttackBehavior::RecommitModifiedSet) => {
                    let mut m = w.clone();
                    m[0] = (m[0] + 1) % t;
                    ServerWeights::commit(m, true, &mut rng).0
                }
                _ => honest,
            };
            let served_circuit = if attack == Some(AttackBehavior::SwapCircuit) {
                let mut ops = circuit.ops().to_vec();
                ops.push(Op::AddConst(1));
                Circuit::new(ops)
            } else {
                circuit.clone()
            };
            let inputs: Vec<Vec<u64>> = (0..batch)
                .map(|_| (0..VFHE_ARITY).map(|_| rng.gen_range(0..t)).collect())
                .collect();
            let expected = inputs
                .iter()
                .map(|x| circuit.eval_plain(t, x, Some(&w)).expect("arity matches"))
                .collect();
            let expectation = Expectation {
                circuit: circuit.measurement(p),
                commitment: Some(root),
            };
            let role = VfheServer::new(ctx, &served_circuit, Some(served))?;
            (
                ClientPlan::Vfhe {
                    keys,
                    expectation,
                    inputs,
                    expected,
                },
                Box::new(role),
            )
        }
        App::Pir => {
            let entries: Vec<Vec<u8>> = (0..s.pir_entries).map(|_| random_bytes(&mut rng, s.pir_entry_size)).collect();
            let honest = PirDatabase::from_entries(p, s.pir_entry_size, &entries)?;
            let root = honest.root();
            let indices: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..s.pir_entries)).collect();
            let mut served = honest.clone();
            match attack {
                Some(AttackBehavior::MalformedDbEntry) => served.set_word(indices[0], 0, t),
                Some(AttackBehavior::WrongCommitment) => {
                    let other: Vec<Vec<u8>> = (0..s.pir_entries).map(|_| random_bytes(&mut rng, s.pir_entry_size)).collect();
                    served = PirDatabase::from_entries(p, s.pir_entry_size, &other)?;
                }
                Some(AttackBehavior::RecommitModifiedSet) => {
                    let mut e = entries[indices[0]].clone();
                    e[0] ^= 0xff;
                    served.replace_entry(indices[0], &e);
                }
                _ => {}
            }
            let server = if attack == Some(AttackBehavior::SwapCircuit) {
                let mut image = served.layout().image(p);
                image.binary.extend_from_slice(b"+patched");
                PirServer::with_image(ctx, served, image)
            } else {
                PirServer::new(ctx, served)
            };
            let expected = indices.iter().map(|&i| entries[i].clone()).collect();
            let client = PirClient::new(keys, honest.layout(), root);
            (
                ClientPlan::Pir {
                    client,
                    indices,
                    expected,
                },
                Box::new(server),
            )
        }
        App::Psi => {
            let server_items: Vec<Vec<u8>> = (0..s.psi_server_items).map(|_| psi_item(&mut rng)).collect();
            let layout = PsiLayout::for_set_size(server_items.len());
            let honest = PsiServerSet::new(p, layout, &server_items, &mut rng)?;
            let root = honest.root()?;
            let overlap = s.psi_overlap.min(s.psi_client_items).min(server_items.len());
            let n_client = s.psi_client_items.max(batch);
            let mut items: Vec<Vec<u8>> = (0..overlap).map(|i| server_items[i * 7 % server_items.len()].clone()).collect();
            while items.len() < n_client {
                items.push(psi_item(&mut rng));
            }
            let served = match attack {
                Some(AttackBehavior::MalformedDbEntry) => {
                    let mut bad = server_items.clone();
                    bad[0] = Vec::new();
                    PsiServerSet::from_parts(p, layout, *honest.key(), bad, honest.salts().to_vec())
                }
                Some(AttackBehavior::WrongCommitment) => {
                    let other: Vec<Vec<u8>> = (0..s.psi_server_items).map(|_| psi_item(&mut rng)).collect();
                    PsiServerSet::new(p, layout, &other, &mut rng)?
                }
                Some(AttackBehavior::RecommitModifiedSet) => {
                    let mut m = server_items.clone();
                    m[0].push(b'!');
                    PsiServerSet::new(p, layout, &m, &mut rng)?
                }
                _ => honest,
            };
            let server = if attack == Some(AttackBehavior::SwapCircuit) {
                let mut image = layout.image(p);
                image.binary.extend_from_slice(b"+patched");
                PsiServer::with_image(ctx, served, image)
            } else {
                PsiServer::new(ctx, served)
            };
            let expected = items.iter().filter(|x| server_items.contains(x)).cloned().collect();
            let client = PsiClient::new(keys, layout, root);
            (ClientPlan::Psi { client, items, expected }, Box::new(server))
        }
    };
    let adv = Adversary::new(role, attack, s.seed ^ 0xadd5).with_client_key(pk);
    Ok((plan, adv))
}

/// Result of [`run_session`].
#[derive(Debug, Clone)]
pub struct SessionResult {
    pub app: App,
    pub attack: Option<AttackBehavior>,
    pub accepted: bool,
    pub verdict: Verdict,
    /// Client decryptions performed during the session.
    pub decrypted: u64,
    pub decryption_failures: u64,
    pub output: Output,
    /// Plaintext oracle for the honest computation.
    pub expected: Output,
    pub transcript_digest: Option<Digest>,
    pub pi_bytes: Option<Vec<u8>>,
    pub replies_digest: Digest,
    pub record: Option<SessionRecord>,
    pub setup_ms: f64,
    pub timings: ClientTimings,
    pub server: PhaseStats,
    pub bytes_on_wire: u64,
}

impl SessionResult {
    pub fn output_correct(&self) -> bool {
        self.output == self.expected
    }
}

fn run_over<R: RngCore + CryptoRng>(
    kind: TransportKind,
    plan: &mut ClientPlan,
    adv: &mut Adversary,
    batch: usize,
    rng: &mut R,
) -> Result<ClientOutcome, HarnessError> {
    let (mut client_t, mut server_t): (Box<dyn Transport>, Box<dyn Transport>) = match kind {
        TransportKind::Channel => {
            let (a, b) = channel_pair();
            (Box::new(a), Box::new(b))
        }
        TransportKind::Tcp(port) => {
            let (a, b) = tcp_pair(port)?;
            (Box::new(a), Box::new(b))
        }
    };
    std::thread::scope(|sc| {
        let server = sc.spawn(move || serve(server_t.as_mut(), adv));
        let out = plan.run(client_t.as_mut(), batch, rng);
        drop(client_t);
        let served = server.join().map_err(|_| HarnessError::Protocol("server thread panicked".into()))?;
        let out = out?;
        served?;
        Ok(out)
    })
}

/// Builds the scenario, runs one session (after an honest warm-up session
/// when the attack replays a proof) and reports the client's verdict.
pub fn run_session(s: &Scenario, attack: Option<AttackBehavior>) -> Result<SessionResult, HarnessError> {
    let setup = Instant::now();
    let (mut plan, mut adv) = build(s, attack)?;
    let setup_ms = ms(setup);
    let mut rng = ChaCha20Rng::seed_from_u64(s.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let batch = if attack.is_some_and(|a| a.needs_batch()) {
        s.batch.max(2)
    } else {
        s.batch.max(1)
    };
    if attack == Some(AttackBehavior::ReplayTranscript) {
        let warm = run_over(s.transport, &mut plan, &mut adv, batch, &mut rng)?;
        let pi = warm
            .pi
            .ok_or_else(|| HarnessError::Protocol("warm-up session produced no proof".into()))?;
        adv.set_replay(pi);
    }
    let decrypted_before = plan.decryptions();
    let failures_before = plan.decryption_failures();
    let stats_before = adv.stats();
    let out = run_over(s.transport, &mut plan, &mut adv, batch, &mut rng)?;
    let stats_after = adv.stats();
    let server = PhaseStats {
        open_virtual_us: stats_after.open_virtual_us - stats_before.open_virtual_us,
        rounds_virtual_us: stats_after.rounds_virtual_us - stats_before.rounds_virtual_us,
        finish_virtual_us: stats_after.finish_virtual_us - stats_before.finish_virtual_us,
        signatures: stats_after.signatures - stats_before.signatures,
    };
    let anchors = plan.anchors();
    Ok(SessionResult {
        app: s.app,
        attack,
        accepted: out.accepted(),
        verdict: out.verdict,
        decrypted: plan.decryptions() - decrypted_before,
        decryption_failures: plan.decryption_failures() - failures_before,
        output: out.output.clone(),
        expected: plan.expected(),
        transcript_digest: out.pi.as_ref().map(|pi| pi.transcript.running_digest()),
        pi_bytes: out.pi.as_ref().map(|pi| pi.to_bytes()),
        replies_digest: out.replies_digest,
        record: out.record(&anchors),
        setup_ms,
        timings: out.timings,
        server,
        bytes_on_wire: out.bytes_on_wire,
    })
}
