//! Authenticated PIR: one-hot encrypted queries against a committed, public
//! database, answered inside an enclave.
//!
//! Entries are packed with a 4-byte checksum so that a wrong answer is
//! observable after decryption. The enclave type-checks every packed word
//! before serving, which removes the selective-failure channel: a server
//! that plants an out-of-range word is refused before any query is read.

use std::fmt;
use std::sync::Arc;

use rand::{CryptoRng, RngCore};

use crate::crypto::{hash, Digest, MerkleTree};
use crate::fhe::{self, Ciphertext, FheError, FheParams, Plaintext, PreparedCiphertext, PreparedPlaintext};
use crate::monitor::{AbortReason, AttestedTranscript, EnclaveAbort, EnclaveId, EnclaveImage, EnclaveProgram, ProgramFactory};
use crate::vfhe::{decode_ciphertexts, encode_ciphertexts, ClientKeys, ClientSession, Expectation, Rejection, ServerContext, VfheError};

pub const CHECKSUM_LEN: usize = 4;
const IMAGE_PREFIX: &[u8] = b"pir/inner-product/v1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PirError {
    #[error("invalid database: {0}")]
    InvalidDatabase(String),
    #[error("index {index} out of range for {n} entries")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("server refused: {0}")]
    Refused(EnclaveAbort),
    #[error("server has not loaded its database")]
    NotInitialized,
    #[error("proof rejected: {0}")]
    Rejected(Rejection),
    #[error("decrypted entry {index} fails its checksum")]
    DecryptionFailure { index: usize },
    #[error("{0} responses for {1} queries")]
    ResponseCount(usize, usize),
    #[error(transparent)]
    Vfhe(VfheError),
    #[error(transparent)]
    Fhe(#[from] FheError),
}

impl From<VfheError> for PirError {
    fn from(e: VfheError) -> Self {
        match e {
            VfheError::EvalAborted(a) => PirError::Refused(a),
            other => PirError::Vfhe(other),
        }
    }
}

/// Public shape of a database: what the client needs besides the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PirLayout {
    pub n_entries: usize,
    pub entry_size: usize,
}

impl PirLayout {
    pub fn new(n_entries: usize, entry_size: usize) -> Result<Self, PirError> {
        if !n_entries.is_power_of_two() || n_entries > u32::MAX as usize {
            return Err(PirError::InvalidDatabase(format!("{n_entries} entries; need a power of two")));
        }
        if entry_size == 0 {
            return Err(PirError::InvalidDatabase("entry size must be positive".into()));
        }
        Ok(PirLayout { n_entries, entry_size })
    }

    /// Packed coefficient words per entry, checksum included.
    pub fn words_per_entry(&self, params: &FheParams) -> usize {
        let bits = params.bits_per_coeff() as usize;
        ((self.entry_size + CHECKSUM_LEN) * 8).div_ceil(bits)
    }

    /// Plaintexts (and response ciphertexts) per entry.
    pub fn columns(&self, params: &FheParams) -> usize {
        self.words_per_entry(params).div_ceil(params.n())
    }

    pub fn image(&self, params: &FheParams) -> EnclaveImage {
        let mut binary = IMAGE_PREFIX.to_vec();
        binary.extend_from_slice(&params.id().to_be_bytes());
        binary.extend_from_slice(&(self.n_entries as u32).to_be_bytes());
        binary.extend_from_slice(&(self.entry_size as u32).to_be_bytes());
        EnclaveImage::new(binary)
    }

    pub fn measurement(&self, params: &FheParams) -> Digest {
        self.image(params).measurement()
    }
}

pub fn checksum(entry: &[u8]) -> [u8; CHECKSUM_LEN] {
    hash(entry).0[..CHECKSUM_LEN].try_into().unwrap()
}

/// Splits `bytes` into big-endian `bits`-wide words (last word zero-padded).
fn pack_bits(bytes: &[u8], bits: u32, words: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(words);
    let (mut acc, mut have) = (0u128, 0u32);
    for &b in bytes {
        acc = acc << 8 | b as u128;
        have += 8;
        while have >= bits {
            have -= bits;
            out.push((acc >> have) as u64 & ((1 << bits) - 1));
        }
    }
    if have > 0 {
        out.push((acc << (bits - have)) as u64 & ((1 << bits) - 1));
    }
    out.resize(words, 0);
    out
}

fn unpack_bits(words: &[u64], bits: u32, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    let (mut acc, mut have) = (0u128, 0u32);
    for &w in words {
        acc = acc << bits | (w & ((1 << bits) - 1)) as u128;
        have += bits;
        while have >= 8 && out.len() < len {
            have -= 8;
            out.push((acc >> have) as u8);
        }
        acc &= (1u128 << have) - 1;
    }
    out
}

/// Packs one entry (zero-padded to the entry size) plus its checksum.
pub fn pack_entry(params: &FheParams, layout: &PirLayout, entry: &[u8]) -> Vec<u64> {
    let mut padded = entry.to_vec();
    padded.resize(layout.entry_size, 0);
    let sum = checksum(&padded);
    padded.extend_from_slice(&sum);
    pack_bits(&padded, params.bits_per_coeff(), layout.words_per_entry(params))
}

/// Inverse of [`pack_entry`]; `None` on checksum mismatch.
pub fn unpack_entry(params: &FheParams, layout: &PirLayout, words: &[u64]) -> Option<Vec<u8>> {
    let bytes = unpack_bits(words, params.bits_per_coeff(), layout.entry_size + CHECKSUM_LEN);
    let (entry, sum) = bytes.split_at(layout.entry_size);
    (checksum(entry) == sum).then(|| entry.to_vec())
}

/// Packed database: `N × L` coefficient words.
#[derive(Clone, PartialEq, Eq)]
pub struct PirDatabase {
    params: FheParams,
    layout: PirLayout,
    words: Vec<u64>,
}

impl fmt::Debug for PirDatabase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PirDatabase").field("layout", &self.layout).finish_non_exhaustive()
    }
}

impl PirDatabase {
    pub fn from_entries<E: AsRef<[u8]>>(params: &FheParams, entry_size: usize, entries: &[E]) -> Result<Self, PirError> {
        let layout = PirLayout::new(entries.len(), entry_size)?;
        let mut words = Vec::with_capacity(entries.len() * layout.words_per_entry(params));
        for (i, e) in entries.iter().enumerate() {
            if e.as_ref().len() > entry_size {
                return Err(PirError::InvalidDatabase(format!("entry {i} exceeds {entry_size} bytes")));
            }
            words.extend(pack_entry(params, &layout, e.as_ref()));
        }
        Ok(PirDatabase { params: params.clone(), layout, words })
    }

    /// Raw constructor that skips packing; words are not range checked.
    pub fn from_words(params: &FheParams, layout: PirLayout, words: Vec<u64>) -> Result<Self, PirError> {
        if words.len() != layout.n_entries * layout.words_per_entry(params) {
            return Err(PirError::InvalidDatabase(format!("{} words do not fit the layout", words.len())));
        }
        Ok(PirDatabase { params: params.clone(), layout, words })
    }

    /// Parses a file of concatenated fixed-size entries.
    pub fn from_file_bytes(params: &FheParams, entry_size: usize, bytes: &[u8]) -> Result<Self, PirError> {
        if entry_size == 0 || bytes.len() % entry_size != 0 {
            return Err(PirError::InvalidDatabase(format!("{} bytes is not a multiple of {entry_size}", bytes.len())));
        }
        let entries: Vec<&[u8]> = bytes.chunks(entry_size).collect();
        Self::from_entries(params, entry_size, &entries)
    }

    pub fn layout(&self) -> PirLayout {
        self.layout
    }

    pub fn params(&self) -> &FheParams {
        &self.params
    }

    pub fn entry_words(&self, i: usize) -> &[u64] {
        let l = self.layout.words_per_entry(&self.params);
        &self.words[i * l..(i + 1) * l]
    }

    pub fn entry(&self, i: usize) -> Option<Vec<u8>> {
        unpack_entry(&self.params, &self.layout, self.entry_words(i))
    }

    /// Overwrites one packed word without any range check. Hook for
    /// modeling a server that plants out-of-range values.
    pub fn set_word(&mut self, entry: usize, word: usize, value: u64) {
        let l = self.layout.words_per_entry(&self.params);
        self.words[entry * l + word] = value;
    }

    pub fn replace_entry(&mut self, i: usize, entry: &[u8]) {
        let l = self.layout.words_per_entry(&self.params);
        let packed = pack_entry(&self.params, &self.layout, entry);
        self.words[i * l..(i + 1) * l].copy_from_slice(&packed);
    }

    fn leaves(&self) -> Vec<Vec<u8>> {
        let l = self.layout.words_per_entry(&self.params);
        self.words.chunks(l).map(|c| c.iter().flat_map(|w| w.to_be_bytes()).collect()).collect()
    }

    /// Binding, non-hiding commitment: the database is public.
    pub fn merkle_tree(&self) -> MerkleTree {
        MerkleTree::build(&self.leaves(), None).expect("database is non-empty")
    }

    pub fn root(&self) -> Digest {
        self.merkle_tree().root()
    }

    /// Server input: `N(4) ‖ L(4) ‖ N·L words (8 bytes, big-endian)`.
    pub fn to_server_input(&self) -> Vec<u8> {
        let l = self.layout.words_per_entry(&self.params);
        let mut out = Vec::with_capacity(8 + 8 * self.words.len());
        out.extend_from_slice(&(self.layout.n_entries as u32).to_be_bytes());
        out.extend_from_slice(&(l as u32).to_be_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out
    }
}

struct PirProgram {
    params: FheParams,
    layout: PirLayout,
    /// `[entry][column]`
    prepared: Option<Vec<Vec<PreparedPlaintext>>>,
}

impl PirProgram {
    fn parse_and_check(&self, w: &[u8]) -> Result<(Vec<u64>, Digest), EnclaveAbort> {
        let bad = |m: String| EnclaveAbort::new(AbortReason::MalformedMessage, m);
        if w.len() < 8 {
            return Err(bad("database header truncated".into()));
        }
        let n = u32::from_be_bytes(w[..4].try_into().unwrap()) as usize;
        let l = u32::from_be_bytes(w[4..8].try_into().unwrap()) as usize;
        if n != self.layout.n_entries || l != self.layout.words_per_entry(&self.params) {
            return Err(bad(format!("database shape {n}×{l} does not match the image")));
        }
        if w.len() != 8 + 8 * n * l {
            return Err(bad("database body has the wrong length".into()));
        }
        let words: Vec<u64> = w[8..].chunks_exact(8).map(|c| u64::from_be_bytes(c.try_into().unwrap())).collect();
        if let Err(e) = fhe::check_plaintext_space(&self.params, &words) {
            return Err(EnclaveAbort::new(
                AbortReason::WellFormednessViolation,
                format!("database word outside the plaintext space: {e}"),
            ));
        }
        let leaves: Vec<&[u8]> = w[8..].chunks(8 * l).collect();
        let root = MerkleTree::build(&leaves, None).map_err(|e| bad(e.to_string()))?.root();
        Ok((words, root))
    }
}

impl EnclaveProgram for PirProgram {
    fn load_server_input(&mut self, w: &[u8]) -> Result<Digest, EnclaveAbort> {
        let (words, root) = self.parse_and_check(w)?;
        let (n, l) = (self.params.n(), self.layout.words_per_entry(&self.params));
        let cols = self.layout.columns(&self.params);
        let mut prepared = Vec::with_capacity(self.layout.n_entries);
        for entry in words.chunks(l) {
            let mut row = Vec::with_capacity(cols);
            for c in 0..cols {
                let slice = &entry[c * n..((c + 1) * n).min(l)];
                let m = Plaintext::new(&self.params, slice).expect("range checked above");
                row.push(
                    PreparedPlaintext::new(&self.params, &m)
                        .map_err(|e| EnclaveAbort::new(AbortReason::ProtocolViolation, e.to_string()))?,
                );
            }
            prepared.push(row);
        }
        self.prepared = Some(prepared);
        Ok(root)
    }

    fn handle(&mut self, input: &[u8]) -> Result<Vec<u8>, EnclaveAbort> {
        let prepared = self
            .prepared
            .as_ref()
            .ok_or_else(|| EnclaveAbort::new(AbortReason::ProtocolViolation, "database not loaded"))?;
        let cts = decode_query(&self.params, input).map_err(|e| EnclaveAbort::new(AbortReason::MalformedMessage, e.to_string()))?;
        if cts.len() != self.layout.n_entries {
            return Err(EnclaveAbort::new(
                AbortReason::InputMismatch,
                format!("query has {} ciphertexts for {} entries", cts.len(), self.layout.n_entries),
            ));
        }
        let pc: Vec<PreparedCiphertext> = cts
            .iter()
            .map(|c| PreparedCiphertext::new(&self.params, c))
            .collect::<Result<_, _>>()
            .map_err(|e| EnclaveAbort::new(AbortReason::MalformedMessage, e.to_string()))?;
        let responses = (0..self.layout.columns(&self.params))
            .map(|col| {
                let column: Vec<&PreparedPlaintext> = prepared.iter().map(|row| &row[col]).collect();
                fhe::dot_plain(&self.params, &pc, &column)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EnclaveAbort::new(AbortReason::ProtocolViolation, e.to_string()))?;
        Ok(encode_ciphertexts(&responses))
    }
}

/// Builds the enclave program serving `layout`.
pub fn program_factory(params: &FheParams, layout: PirLayout) -> ProgramFactory {
    let params = params.clone();
    Arc::new(move || {
        Box::new(PirProgram {
            params: params.clone(),
            layout,
            prepared: None,
        })
    })
}

/// `count(4) ‖ ciphertexts`.
pub fn encode_query(cts: &[Ciphertext]) -> Vec<u8> {
    let mut out = (cts.len() as u32).to_be_bytes().to_vec();
    for c in cts {
        out.extend_from_slice(&c.to_bytes());
    }
    out
}

pub fn decode_query(params: &FheParams, bytes: &[u8]) -> Result<Vec<Ciphertext>, FheError> {
    let head = bytes.get(..4).ok_or_else(|| FheError::Decode("query header truncated".into()))?;
    let count = u32::from_be_bytes(head.try_into().unwrap()) as usize;
    let mut at = 4;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (c, used) = Ciphertext::read_from(params, &bytes[at..])?;
        out.push(c.assume_fresh(params));
        at += used;
    }
    if at != bytes.len() {
        return Err(FheError::Decode("trailing bytes after query".into()));
    }
    Ok(out)
}

/// Server state: its database and the serving enclave, if one is open.
pub struct PirServer {
    ctx: ServerContext,
    db: PirDatabase,
    measurement: Digest,
    enclave: Option<EnclaveId>,
}

impl fmt::Debug for PirServer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PirServer").field("db", &self.db).field("enclave", &self.enclave).finish_non_exhaustive()
    }
}

impl PirServer {
    pub fn new(ctx: ServerContext, db: PirDatabase) -> Self {
        let image = db.layout().image(db.params());
        Self::with_image(ctx, db, image)
    }

    /// Serves from an arbitrary image running the PIR program.
    pub fn with_image(mut ctx: ServerContext, db: PirDatabase, image: EnclaveImage) -> Self {
        let factory = program_factory(db.params(), db.layout());
        let measurement = ctx.register_program(image, factory);
        PirServer {
            ctx,
            db,
            measurement,
            enclave: None,
        }
    }

    pub fn database(&self) -> &PirDatabase {
        &self.db
    }

    pub fn database_mut(&mut self) -> &mut PirDatabase {
        &mut self.db
    }

    pub fn context(&self) -> &ServerContext {
        &self.ctx
    }

    pub fn context_mut(&mut self) -> &mut ServerContext {
        &mut self.ctx
    }

    pub fn measurement(&self) -> Digest {
        self.measurement
    }

    /// Opens a serving enclave and loads (type-checks, commits) the database.
    pub fn init(&mut self) -> Result<Digest, PirError> {
        let eid = self.ctx.open(&self.measurement)?;
        self.enclave = None;
        let root = self.ctx.load_server_input(eid, &self.db.to_server_input())?;
        self.enclave = Some(eid);
        Ok(root)
    }

    pub fn answer(&mut self, query: &[u8]) -> Result<Vec<u8>, PirError> {
        let eid = self.enclave.ok_or(PirError::NotInitialized)?;
        self.ctx.run(eid, query).map_err(|e| {
            self.enclave = None;
            e.into()
        })
    }

    /// Attests and closes the serving enclave.
    pub fn attest(&mut self, nonce: [u8; 32]) -> Result<AttestedTranscript, PirError> {
        let eid = self.enclave.take().ok_or(PirError::NotInitialized)?;
        Ok(self.ctx.attest(eid, nonce)?)
    }
}

/// Registers the PIR program and loads the database into a first serving
/// enclave; the returned root is the one committed in its transcript.
pub fn pir_server_init(ctx: ServerContext, db: PirDatabase) -> Result<(PirServer, Digest), PirError> {
    let mut s = PirServer::new(ctx, db);
    let root = s.init()?;
    Ok((s, root))
}

/// A built query: the secret index and the wire message.
pub struct PirQuery {
    pub index: usize,
    pub message: Vec<u8>,
}

impl fmt::Debug for PirQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PirQuery").field("bytes", &self.message.len()).finish_non_exhaustive()
    }
}

/// Client: FHE keys, the database layout and the out-of-band reference root.
pub struct PirClient {
    keys: ClientKeys,
    layout: PirLayout,
    reference_root: Digest,
    decryption_failures: u64,
}

impl fmt::Debug for PirClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PirClient")
            .field("layout", &self.layout)
            .field("reference_root", &self.reference_root)
            .field("decryption_failures", &self.decryption_failures)
            .finish_non_exhaustive()
    }
}

impl PirClient {
    pub fn new(keys: ClientKeys, layout: PirLayout, reference_root: Digest) -> Self {
        PirClient {
            keys,
            layout,
            reference_root,
            decryption_failures: 0,
        }
    }

    pub fn keys(&self) -> &ClientKeys {
        &self.keys
    }

    pub fn layout(&self) -> PirLayout {
        self.layout
    }

    pub fn decryption_failures(&self) -> u64 {
        self.decryption_failures
    }

    pub fn expectation(&self) -> Expectation {
        Expectation {
            circuit: self.layout.measurement(self.keys.params()),
            commitment: Some(self.reference_root),
        }
    }

    /// One-hot encrypted selection vector for `index`.
    pub fn build_query<R: RngCore + CryptoRng>(&self, index: usize, rng: &mut R) -> Result<PirQuery, PirError> {
        self.build_query_for(index, self.layout.n_entries, rng)
    }

    /// As [`Self::build_query`] but for an arbitrary vector length.
    pub fn build_query_for<R: RngCore + CryptoRng>(&self, index: usize, n: usize, rng: &mut R) -> Result<PirQuery, PirError> {
        if index >= n {
            return Err(PirError::IndexOutOfRange { index, n });
        }
        let params = self.keys.params();
        let mut message = Vec::with_capacity(4 + n * Ciphertext::serialized_len(params, 2));
        message.extend_from_slice(&(n as u32).to_be_bytes());
        for j in 0..n {
            let c = self.keys.encrypt_value((j == index) as u64, rng)?;
            message.extend_from_slice(&c.to_bytes());
        }
        Ok(PirQuery { index, message })
    }

    /// Verifies the session, then decrypts and checks every response.
    /// Returns one entry per query, in order.
    pub fn verify_and_decrypt(
        &mut self,
        session: &ClientSession,
        pi: &AttestedTranscript,
        responses: &[Vec<u8>],
    ) -> Result<Vec<Vec<u8>>, PirError> {
        let params = self.keys.params().clone();
        let expect = self.expectation();
        let verified = self
            .keys
            .verify_session_messages(&expect, session, pi, responses, |m| decode_ciphertexts(&params, m))
            .map_err(PirError::Rejected)?;
        let cols = self.layout.columns(&params);
        if verified.ciphertexts().len() != cols * responses.len() {
            return Err(PirError::ResponseCount(verified.ciphertexts().len(), cols * responses.len()));
        }
        let plaintexts = self.keys.decrypt(&verified)?;
        let l = self.layout.words_per_entry(&params);
        let mut out = Vec::with_capacity(responses.len());
        for (q, chunk) in plaintexts.chunks(cols).enumerate() {
            let mut words: Vec<u64> = chunk.iter().flat_map(|m| m.coeffs().to_vec()).collect();
            words.truncate(l);
            match unpack_entry(&params, &self.layout, &words) {
                Some(e) => out.push(e),
                None => {
                    self.decryption_failures += 1;
                    return Err(PirError::DecryptionFailure { index: q });
                }
            }
        }
        Ok(out)
    }

    /// Minimum measured noise budget over verified responses.
    pub fn min_budget(&mut self, session: &ClientSession, pi: &AttestedTranscript, responses: &[Vec<u8>]) -> Result<i64, PirError> {
        let params = self.keys.params().clone();
        let expect = self.expectation();
        let v = self
            .keys
            .verify_session_messages(&expect, session, pi, responses, |m| decode_ciphertexts(&params, m))
            .map_err(PirError::Rejected)?;
        Ok(self.keys.noise_budgets(&v)?.into_iter().min().unwrap_or(i64::MAX))
    }
}
