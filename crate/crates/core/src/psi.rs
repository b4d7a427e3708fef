//! Authenticated PSI.
//!
//! The server's items are masked with a DH-OPRF, hashed into bins, and each
//! bin becomes the monic polynomial whose roots are the masked values in it.
//! The client learns its own masked values through the OPRF round, sends the
//! encrypted powers `y, y², …, y^d` of each, and the enclave returns the
//! encrypted bin polynomial evaluated at `y`, which is zero iff `y` is a root.
//!
//! Bin index and masked value come from disjoint bytes of the OPRF output,
//! so whether two masked values collide does not depend on sharing a bin.
//! Padding roots use the sentinel `t − 1`, which no masked value takes.

use std::fmt;
use std::sync::Arc;

use rand::{CryptoRng, RngCore};

use crate::crypto::{self, hash_parts, oprf_blind, oprf_evaluate, oprf_unblind, Digest, GroupElement, GroupScalar, MerkleTree, Salt};
use crate::fhe::{self, Ciphertext, FheError, FheParams, Plaintext};
use crate::monitor::{AbortReason, AttestedTranscript, EnclaveAbort, EnclaveId, EnclaveImage, EnclaveProgram, ProgramFactory};
use crate::vfhe::{decode_ciphertexts, encode_ciphertexts, ClientKeys, ClientSession, Expectation, Rejection, ServerContext, VfheError};

pub const DEFAULT_DEGREE: usize = 8;
pub const MAX_ITEM_LEN: usize = 1024;
const IMAGE_PREFIX: &[u8] = b"psi/oprf-poly/v1";
const OUTPUT_DST: &[u8] = b"psi/oprf-output/v1";

pub const MSG_OPRF: u8 = 0x01;
pub const MSG_QUERY: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PsiError {
    #[error("server set is empty")]
    EmptySet,
    #[error("item {0} is empty or longer than {MAX_ITEM_LEN} bytes")]
    MalformedItem(usize),
    #[error("bin {bin} holds {load} items, above degree {degree}")]
    BinOverflow { bin: usize, load: usize, degree: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("server refused: {0}")]
    Refused(EnclaveAbort),
    #[error("server has not loaded its set")]
    NotInitialized,
    #[error("proof rejected: {0}")]
    Rejected(Rejection),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Vfhe(VfheError),
    #[error(transparent)]
    Fhe(#[from] FheError),
}

impl From<VfheError> for PsiError {
    fn from(e: VfheError) -> Self {
        match e {
            VfheError::EvalAborted(a) => PsiError::Refused(a),
            other => PsiError::Vfhe(other),
        }
    }
}

impl From<crypto::CryptoError> for PsiError {
    fn from(e: crypto::CryptoError) -> Self {
        PsiError::Protocol(e.to_string())
    }
}

/// Public binning shape shared by both parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PsiLayout {
    pub bins: usize,
    pub degree: usize,
}

impl PsiLayout {
    pub fn new(bins: usize, degree: usize) -> Result<Self, PsiError> {
        if bins == 0 || bins > u32::MAX as usize {
            return Err(PsiError::InvalidLayout(format!("{bins} bins")));
        }
        if degree == 0 || degree > 255 {
            return Err(PsiError::InvalidLayout(format!("degree {degree} not in 1..=255")));
        }
        Ok(PsiLayout { bins, degree })
    }

    /// `2·|S|` bins rounded up to a power of two, degree 8.
    pub fn for_set_size(n: usize) -> Self {
        PsiLayout {
            bins: (2 * n.max(1)).next_power_of_two(),
            degree: DEFAULT_DEGREE,
        }
    }

    pub fn image(&self, params: &FheParams) -> EnclaveImage {
        let mut binary = IMAGE_PREFIX.to_vec();
        binary.extend_from_slice(&params.id().to_be_bytes());
        binary.extend_from_slice(&(self.bins as u32).to_be_bytes());
        binary.push(self.degree as u8);
        EnclaveImage::new(binary)
    }

    pub fn measurement(&self, params: &FheParams) -> Digest {
        self.image(params).measurement()
    }
}

/// An item's position after masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Masked {
    pub bin: u32,
    pub y: u64,
}

/// Final OPRF output for `x` given the unblinded element `H(x)^k`.
pub fn oprf_output(x: &[u8], e: &GroupElement) -> Digest {
    hash_parts(&[OUTPUT_DST, &(x.len() as u32).to_be_bytes(), x, &e.to_bytes()])
}

/// Bins and masks an OPRF output: `bin = F[0..8] mod B`, `y = F[8..16] mod (t − 1)`.
pub fn mask(params: &FheParams, layout: &PsiLayout, f: &Digest) -> Masked {
    let hi = u64::from_be_bytes(f.0[..8].try_into().unwrap());
    let lo = u64::from_be_bytes(f.0[8..16].try_into().unwrap());
    Masked {
        bin: (hi % layout.bins as u64) as u32,
        y: lo % (params.t() - 1),
    }
}

/// Direct evaluation with the key, as the server computes it.
pub fn mask_direct(params: &FheParams, layout: &PsiLayout, k: &GroupScalar, x: &[u8]) -> Result<Masked, PsiError> {
    let e = crypto::hash_to_group(x).mul(k)?;
    Ok(mask(params, layout, &oprf_output(x, &e)))
}

pub fn sentinel(params: &FheParams) -> u64 {
    params.t() - 1
}

/// Coefficients `a₀…a_d` of `∏ (Y − rⱼ)` mod t over `roots`, padded with the
/// sentinel to exactly `degree` roots.
pub fn bin_polynomial(t: u64, roots: &[u64], degree: usize) -> Vec<u64> {
    let mut a = vec![1u64];
    let pad = std::iter::repeat(t - 1).take(degree.saturating_sub(roots.len()));
    for r in roots.iter().copied().chain(pad) {
        let neg = (t - r % t) % t;
        let mut next = vec![0u64; a.len() + 1];
        for (i, &c) in a.iter().enumerate() {
            next[i + 1] = (next[i + 1] + c) % t;
            next[i] = (next[i] + c * neg) % t;
        }
        a = next;
    }
    a
}

/// Per-bin polynomials over masked values; errors on the first overfull bin.
pub fn build_bins(params: &FheParams, layout: &PsiLayout, masked: &[Masked]) -> Result<Vec<Vec<u64>>, PsiError> {
    let mut roots = vec![Vec::new(); layout.bins];
    for m in masked {
        roots[m.bin as usize].push(m.y);
    }
    if let Some((bin, r)) = roots.iter().enumerate().find(|(_, r)| r.len() > layout.degree) {
        return Err(PsiError::BinOverflow {
            bin,
            load: r.len(),
            degree: layout.degree,
        });
    }
    Ok(roots.iter().map(|r| bin_polynomial(params.t(), r, layout.degree)).collect())
}

fn check_items<I: AsRef<[u8]>>(items: &[I]) -> Result<(), PsiError> {
    if items.is_empty() {
        return Err(PsiError::EmptySet);
    }
    match items.iter().position(|x| x.as_ref().is_empty() || x.as_ref().len() > MAX_ITEM_LEN) {
        Some(i) => Err(PsiError::MalformedItem(i)),
        None => Ok(()),
    }
}

/// The server's private set, OPRF key and commitment salts.
#[derive(Clone)]
pub struct PsiServerSet {
    params: FheParams,
    layout: PsiLayout,
    key: GroupScalar,
    items: Vec<Vec<u8>>,
    salts: Vec<Salt>,
}

impl fmt::Debug for PsiServerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PsiServerSet")
            .field("layout", &self.layout)
            .field("items", &self.items.len())
            .finish_non_exhaustive()
    }
}

impl PsiServerSet {
    /// Samples the OPRF key and salts, then checks that the bins fit.
    pub fn new<I: AsRef<[u8]>, R: RngCore + CryptoRng>(
        params: &FheParams,
        layout: PsiLayout,
        items: &[I],
        rng: &mut R,
    ) -> Result<Self, PsiError> {
        check_items(items)?;
        let key = GroupScalar::random_nonzero(rng);
        let salts = (0..items.len())
            .map(|_| {
                let mut s = [0u8; 16];
                rng.fill_bytes(&mut s);
                s
            })
            .collect();
        let set = Self::from_parts(params, layout, key, items.iter().map(|x| x.as_ref().to_vec()).collect(), salts);
        build_bins(params, &layout, &set.masked_values()?)?;
        Ok(set)
    }

    /// Unchecked constructor, for modeling a server with arbitrary state.
    pub fn from_parts(params: &FheParams, layout: PsiLayout, key: GroupScalar, items: Vec<Vec<u8>>, salts: Vec<Salt>) -> Self {
        PsiServerSet {
            params: params.clone(),
            layout,
            key,
            items,
            salts,
        }
    }

    pub fn layout(&self) -> PsiLayout {
        self.layout
    }

    pub fn params(&self) -> &FheParams {
        &self.params
    }

    pub fn items(&self) -> &[Vec<u8>] {
        &self.items
    }

    pub fn key(&self) -> &GroupScalar {
        &self.key
    }

    pub fn salts(&self) -> &[Salt] {
        &self.salts
    }

    pub fn masked_values(&self) -> Result<Vec<Masked>, PsiError> {
        self.items.iter().map(|x| mask_direct(&self.params, &self.layout, &self.key, x)).collect()
    }

    /// Hiding commitment over the raw items.
    pub fn root(&self) -> Result<Digest, PsiError> {
        Ok(MerkleTree::build(&self.items, Some(self.salts.clone()))?.root())
    }

    /// `key(32) ‖ count(4) ‖ (len(2) ‖ item)* ‖ salt(16)*`.
    pub fn to_server_input(&self) -> Vec<u8> {
        let mut out = self.key.to_bytes().to_vec();
        out.extend_from_slice(&(self.items.len() as u32).to_be_bytes());
        for x in &self.items {
            out.extend_from_slice(&(x.len() as u16).to_be_bytes());
            out.extend_from_slice(x);
        }
        for s in &self.salts {
            out.extend_from_slice(s);
        }
        out
    }
}

fn parse_server_input(w: &[u8]) -> Result<(GroupScalar, Vec<Vec<u8>>, Vec<Salt>), String> {
    let mut at = 0;
    let mut take = |n: usize| -> Result<&[u8], String> {
        let s = w.get(at..at + n).ok_or("server input truncated")?;
        at += n;
        Ok(s)
    };
    let key = GroupScalar::from_bytes(take(32)?).map_err(|e| e.to_string())?;
    let count = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut items = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u16::from_be_bytes(take(2)?.try_into().unwrap()) as usize;
        items.push(take(len)?.to_vec());
    }
    let mut salts = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        salts.push(take(16)?.try_into().unwrap());
    }
    if at != w.len() {
        return Err("trailing bytes after server input".into());
    }
    Ok((key, items, salts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Round {
    Oprf,
    Query,
}

struct PsiProgram {
    params: FheParams,
    layout: PsiLayout,
    key: Option<GroupScalar>,
    /// `[bin][coefficient]`
    bins: Vec<Vec<u64>>,
    next: Round,
}

impl PsiProgram {
    fn oprf(&mut self, key: GroupScalar, body: &[u8]) -> Result<Vec<u8>, EnclaveAbort> {
        let bad = |m: String| EnclaveAbort::new(AbortReason::MalformedMessage, m);
        let count = read_count(body).map_err(bad)?;
        if body.len() != 4 + 32 * count {
            return Err(bad("OPRF request has the wrong length".into()));
        }
        let mut out = (count as u32).to_be_bytes().to_vec();
        for p in body[4..].chunks_exact(32) {
            let e = GroupElement::from_bytes(p).map_err(|e| bad(e.to_string()))?;
            out.extend_from_slice(&oprf_evaluate(&key, &e).map_err(|e| bad(e.to_string()))?.to_bytes());
        }
        Ok(out)
    }

    fn query(&self, body: &[u8]) -> Result<Vec<u8>, EnclaveAbort> {
        let bad = |m: String| EnclaveAbort::new(AbortReason::MalformedMessage, m);
        let count = read_count(body).map_err(bad)?;
        let mut at = 4;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let bin = body.get(at..at + 4).ok_or_else(|| bad("query truncated".into()))?;
            let bin = u32::from_be_bytes(bin.try_into().unwrap()) as usize;
            at += 4;
            let a = self
                .bins
                .get(bin)
                .ok_or_else(|| bad(format!("bin {bin} out of range for {} bins", self.layout.bins)))?;
            let mut acc: Option<Ciphertext> = None;
            for coeff in &a[1..] {
                let (power, used) = Ciphertext::read_from(&self.params, &body[at..]).map_err(|e| bad(e.to_string()))?;
                at += used;
                let power = power.assume_fresh(&self.params);
                let m = Plaintext::constant(&self.params, *coeff).expect("coefficients are reduced mod t");
                let term = fhe::mul_plain(&self.params, &power, &m).map_err(|e| bad(e.to_string()))?;
                acc = Some(match acc {
                    None => term,
                    Some(s) => fhe::add(&self.params, &s, &term).map_err(|e| bad(e.to_string()))?,
                });
            }
            let a0 = Plaintext::constant(&self.params, a[0]).expect("coefficients are reduced mod t");
            let acc = acc.expect("degree is at least one");
            out.push(fhe::add_plain(&self.params, &acc, &a0).map_err(|e| bad(e.to_string()))?);
        }
        if at != body.len() {
            return Err(bad("trailing bytes after query".into()));
        }
        Ok(encode_ciphertexts(&out))
    }
}

fn read_count(body: &[u8]) -> Result<usize, String> {
    let head = body.get(..4).ok_or("message header truncated")?;
    Ok(u32::from_be_bytes(head.try_into().unwrap()) as usize)
}

impl EnclaveProgram for PsiProgram {
    fn load_server_input(&mut self, w: &[u8]) -> Result<Digest, EnclaveAbort> {
        let (key, items, salts) = parse_server_input(w).map_err(|m| EnclaveAbort::new(AbortReason::MalformedMessage, m))?;
        if let Err(e) = check_items(&items) {
            return Err(EnclaveAbort::new(AbortReason::WellFormednessViolation, e.to_string()));
        }
        let root = MerkleTree::build(&items, Some(salts))
            .map_err(|e| EnclaveAbort::new(AbortReason::MalformedMessage, e.to_string()))?
            .root();
        let masked: Vec<Masked> = items
            .iter()
            .map(|x| mask_direct(&self.params, &self.layout, &key, x))
            .collect::<Result<_, _>>()
            .map_err(|e| EnclaveAbort::new(AbortReason::MalformedMessage, e.to_string()))?;
        self.bins = build_bins(&self.params, &self.layout, &masked)
            .map_err(|e| EnclaveAbort::new(AbortReason::WellFormednessViolation, e.to_string()))?;
        self.key = Some(key);
        Ok(root)
    }

    fn handle(&mut self, input: &[u8]) -> Result<Vec<u8>, EnclaveAbort> {
        let key = self
            .key
            .ok_or_else(|| EnclaveAbort::new(AbortReason::ProtocolViolation, "set not loaded"))?;
        let (&tag, body) = input
            .split_first()
            .ok_or_else(|| EnclaveAbort::new(AbortReason::MalformedMessage, "empty message"))?;
        match (tag, self.next) {
            (MSG_OPRF, Round::Oprf) => {
                let out = self.oprf(key, body)?;
                self.next = Round::Query;
                Ok(out)
            }
            (MSG_QUERY, Round::Query) => self.query(body),
            (MSG_OPRF, _) | (MSG_QUERY, _) => Err(EnclaveAbort::new(AbortReason::ProtocolViolation, "rounds out of order")),
            _ => Err(EnclaveAbort::new(AbortReason::MalformedMessage, format!("unknown message tag {tag:#04x}"))),
        }
    }
}

pub fn program_factory(params: &FheParams, layout: PsiLayout) -> ProgramFactory {
    let params = params.clone();
    Arc::new(move || {
        Box::new(PsiProgram {
            params: params.clone(),
            layout,
            key: None,
            bins: Vec::new(),
            next: Round::Oprf,
        })
    })
}

/// Server state and the serving enclave, if one is open.
pub struct PsiServer {
    ctx: ServerContext,
    set: PsiServerSet,
    measurement: Digest,
    enclave: Option<EnclaveId>,
}

impl fmt::Debug for PsiServer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PsiServer").field("set", &self.set).field("enclave", &self.enclave).finish_non_exhaustive()
    }
}

impl PsiServer {
    pub fn new(ctx: ServerContext, set: PsiServerSet) -> Self {
        let image = set.layout().image(set.params());
        Self::with_image(ctx, set, image)
    }

    pub fn with_image(mut ctx: ServerContext, set: PsiServerSet, image: EnclaveImage) -> Self {
        let measurement = ctx.register_program(image, program_factory(set.params(), set.layout()));
        PsiServer {
            ctx,
            set,
            measurement,
            enclave: None,
        }
    }

    pub fn set(&self) -> &PsiServerSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut PsiServerSet {
        &mut self.set
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

    /// Opens a serving enclave and loads (checks, bins, commits) the set.
    pub fn init(&mut self) -> Result<Digest, PsiError> {
        self.enclave = None;
        let eid = self.ctx.open(&self.measurement)?;
        let root = self.ctx.load_server_input(eid, &self.set.to_server_input())?;
        self.enclave = Some(eid);
        Ok(root)
    }

    pub fn answer(&mut self, msg: &[u8]) -> Result<Vec<u8>, PsiError> {
        let eid = self.enclave.ok_or(PsiError::NotInitialized)?;
        self.ctx.run(eid, msg).map_err(|e| {
            self.enclave = None;
            e.into()
        })
    }

    pub fn attest(&mut self, nonce: [u8; 32]) -> Result<AttestedTranscript, PsiError> {
        let eid = self.enclave.take().ok_or(PsiError::NotInitialized)?;
        Ok(self.ctx.attest(eid, nonce)?)
    }
}

/// Builds the server set with the default layout and opens a first serving
/// enclave. Returns the hiding root committed in its transcript.
pub fn psi_server_init<I: AsRef<[u8]>, R: RngCore + CryptoRng>(
    ctx: ServerContext,
    items: &[I],
    rng: &mut R,
) -> Result<(PsiServer, Digest), PsiError> {
    let layout = PsiLayout::for_set_size(items.len());
    let set = PsiServerSet::new(ctx.params(), layout, items, rng)?;
    let mut server = PsiServer::new(ctx, set);
    let root = server.init()?;
    Ok((server, root))
}

/// Blinding scalars held between the two rounds.
pub struct OprfState {
    items: Vec<Vec<u8>>,
    blinds: Vec<GroupScalar>,
}

impl fmt::Debug for OprfState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OprfState").field("items", &self.items.len()).finish_non_exhaustive()
    }
}

impl OprfState {
    pub fn items(&self) -> &[Vec<u8>] {
        &self.items
    }
}

/// Client: FHE keys, the public layout and the out-of-band reference root.
pub struct PsiClient {
    keys: ClientKeys,
    layout: PsiLayout,
    reference_root: Digest,
}

impl fmt::Debug for PsiClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PsiClient")
            .field("layout", &self.layout)
            .field("reference_root", &self.reference_root)
            .finish_non_exhaustive()
    }
}

impl PsiClient {
    pub fn new(keys: ClientKeys, layout: PsiLayout, reference_root: Digest) -> Self {
        PsiClient {
            keys,
            layout,
            reference_root,
        }
    }

    pub fn keys(&self) -> &ClientKeys {
        &self.keys
    }

    pub fn layout(&self) -> PsiLayout {
        self.layout
    }

    pub fn expectation(&self) -> Expectation {
        Expectation {
            circuit: self.layout.measurement(self.keys.params()),
            commitment: Some(self.reference_root),
        }
    }

    /// First round: `0x01 ‖ count(4) ‖ blinded points`.
    pub fn oprf_request<I: AsRef<[u8]>, R: RngCore + CryptoRng>(&self, items: &[I], rng: &mut R) -> Result<(OprfState, Vec<u8>), PsiError> {
        let mut msg = vec![MSG_OPRF];
        msg.extend_from_slice(&(items.len() as u32).to_be_bytes());
        let mut blinds = Vec::with_capacity(items.len());
        for x in items {
            let (e, r) = oprf_blind(x.as_ref(), rng)?;
            msg.extend_from_slice(&e.to_bytes());
            blinds.push(r);
        }
        let items = items.iter().map(|x| x.as_ref().to_vec()).collect();
        Ok((OprfState { items, blinds }, msg))
    }

    /// Unblinds the server's evaluations into masked values.
    pub fn oprf_finish(&self, state: &OprfState, reply: &[u8]) -> Result<Vec<Masked>, PsiError> {
        let count = read_count(reply).map_err(PsiError::Protocol)?;
        if count != state.items.len() || reply.len() != 4 + 32 * count {
            return Err(PsiError::Protocol(format!("OPRF reply for {count} items, expected {}", state.items.len())));
        }
        let params = self.keys.params();
        reply[4..]
            .chunks_exact(32)
            .zip(state.items.iter().zip(&state.blinds))
            .map(|(p, (x, r))| {
                let e = oprf_unblind(&GroupElement::from_bytes(p)?, r)?;
                Ok(mask(params, &self.layout, &oprf_output(x, &e)))
            })
            .collect()
    }

    /// Second round: `0x02 ‖ count(4) ‖ (bin(4) ‖ Enc(y) … Enc(y^d))*`.
    pub fn build_query<R: RngCore + CryptoRng>(&self, masked: &[Masked], rng: &mut R) -> Result<Vec<u8>, PsiError> {
        let params = self.keys.params();
        let t = params.t();
        let d = self.layout.degree;
        let mut msg = Vec::with_capacity(5 + masked.len() * (4 + d * Ciphertext::serialized_len(params, 2)));
        msg.push(MSG_QUERY);
        msg.extend_from_slice(&(masked.len() as u32).to_be_bytes());
        for m in masked {
            msg.extend_from_slice(&m.bin.to_be_bytes());
            let mut power = 1u64;
            for _ in 0..d {
                power = power * m.y % t;
                msg.extend_from_slice(&self.keys.encrypt_value(power, rng)?.to_bytes());
            }
        }
        Ok(msg)
    }

    /// Verifies the whole session, then decrypts each evaluation; items whose
    /// evaluation is zero are returned, in input order. `query_replies` are
    /// the replies to the query chunks, in order; with none (an empty client
    /// set) the session is still verified.
    pub fn verify_and_intersect(
        &mut self,
        session: &ClientSession,
        pi: &AttestedTranscript,
        state: &OprfState,
        query_replies: &[Vec<u8>],
    ) -> Result<Vec<Vec<u8>>, PsiError> {
        let params = self.keys.params().clone();
        let expect = self.expectation();
        let verified = self
            .keys
            .verify_session_messages(&expect, session, pi, query_replies, |m| decode_ciphertexts(&params, m))
            .map_err(PsiError::Rejected)?;
        if verified.ciphertexts().len() != state.items.len() {
            return Err(PsiError::Protocol(format!(
                "{} evaluations for {} items",
                verified.ciphertexts().len(),
                state.items.len()
            )));
        }
        let values = self.keys.decrypt_values(&verified)?;
        Ok(state
            .items
            .iter()
            .zip(values)
            .filter(|(_, v)| *v == 0)
            .map(|(x, _)| x.clone())
            .collect())
    }
}
