//! Textbook BFV over Z_q[X]/(X^n + 1).
//!
//! Only the operators the applications need are provided: ciphertext
//! addition and plaintext addition/multiplication. None of them draws
//! randomness, so evaluating the same circuit on the same ciphertext always
//! yields the same bytes, which is what makes ciphertext identity a usable
//! soundness predicate.
//!
//! Noise is measured on the "invariant" scale: for a ciphertext with
//! phase `v = ⟨c, (1, s, s², …)⟩`, `w = t·v mod q` (centered). Decryption
//! is correct while `‖w‖∞ < q/2`, and the budget reported is
//! `⌊log₂(q/2) − log₂‖w‖∞⌋`.

mod params;
pub(crate) mod ring;

use std::fmt;

use rand::{CryptoRng, Rng, RngCore};
use rand_distr::{Distribution, Normal};

pub use params::{FheParams, Q55};
use ring::{add_mod, lift, mul_mod, poly_add, poly_mul, poly_neg};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FheError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("coefficient {index} = {value} is outside the plaintext space [0, {t})")]
    PlaintextSpaceViolation { index: usize, value: u64, t: u64 },
    #[error("{len} values do not fit in {n} coefficients")]
    CapacityExceeded { len: usize, n: usize },
    #[error("parameter set mismatch: {0:08x} vs {1:08x}")]
    ParamsMismatch(u32, u32),
    #[error("secret key does not match the ciphertext")]
    KeyMismatch,
    #[error("malformed encoding: {0}")]
    Decode(String),
}

/// A plaintext polynomial. Built through [`Plaintext::new`] its coefficients
/// are guaranteed to lie in `[0, t)`.
#[derive(Clone, PartialEq, Eq)]
pub struct Plaintext {
    coeffs: Vec<u64>,
}

impl fmt::Debug for Plaintext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nz = self.coeffs.iter().filter(|&&c| c != 0).count();
        write!(f, "Plaintext(n={}, nonzero={nz}, head={:?})", self.coeffs.len(), &self.coeffs[..self.coeffs.len().min(4)])
    }
}

impl Plaintext {
    /// Validated constructor: `coeffs` is zero-padded to n.
    pub fn new(params: &FheParams, coeffs: &[u64]) -> Result<Self, FheError> {
        encode_vector(params, coeffs)
    }

    /// Wraps raw coefficients without range checking. Encryption still
    /// rejects out-of-range values; this exists so callers can represent
    /// untrusted inputs before they are checked.
    pub fn from_raw(coeffs: Vec<u64>) -> Self {
        Plaintext { coeffs }
    }

    pub fn constant(params: &FheParams, value: u64) -> Result<Self, FheError> {
        encode_vector(params, &[value])
    }

    pub fn coeffs(&self) -> &[u64] {
        &self.coeffs
    }

    pub fn check(&self, params: &FheParams) -> Result<(), FheError> {
        if self.coeffs.len() != params.n() {
            return Err(FheError::CapacityExceeded {
                len: self.coeffs.len(),
                n: params.n(),
            });
        }
        check_plaintext_space(params, &self.coeffs)
    }
}

/// Rejects any value outside `[0, t)`.
pub fn check_plaintext_space(params: &FheParams, values: &[u64]) -> Result<(), FheError> {
    let t = params.t();
    match values.iter().position(|&v| v >= t) {
        Some(index) => Err(FheError::PlaintextSpaceViolation {
            index,
            value: values[index],
            t,
        }),
        None => Ok(()),
    }
}

/// Packs up to n values into the coefficients of one plaintext.
pub fn encode_vector(params: &FheParams, values: &[u64]) -> Result<Plaintext, FheError> {
    if values.len() > params.n() {
        return Err(FheError::CapacityExceeded {
            len: values.len(),
            n: params.n(),
        });
    }
    check_plaintext_space(params, values)?;
    let mut coeffs = values.to_vec();
    coeffs.resize(params.n(), 0);
    Ok(Plaintext { coeffs })
}

/// First `len` coefficients of `m`.
pub fn decode_vector(m: &Plaintext, len: usize) -> Vec<u64> {
    m.coeffs[..len.min(m.coeffs.len())].to_vec()
}

pub struct FheSecretKey {
    params: FheParams,
    /// ternary, lifted mod q
    s: Vec<u64>,
    s_ntt: Option<Vec<u64>>,
}

#[derive(Clone)]
pub struct FhePublicKey {
    params: FheParams,
    a: Vec<u64>,
    b: Vec<u64>,
    a_ntt: Option<Vec<u64>>,
    b_ntt: Option<Vec<u64>>,
}

pub struct FheKeyPair {
    pub secret: FheSecretKey,
    pub public: FhePublicKey,
}

impl fmt::Debug for FheSecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FheSecretKey").field("params", &self.params.id()).finish_non_exhaustive()
    }
}

impl fmt::Debug for FhePublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FhePublicKey").field("params", &self.params.id()).finish_non_exhaustive()
    }
}

impl fmt::Debug for FheKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FheKeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

/// A BFV ciphertext: k ≥ 2 polynomials modulo q.
#[derive(Clone)]
pub struct Ciphertext {
    params_id: u32,
    polys: Vec<Vec<u64>>,
    /// log₂ of a heuristic bound on ‖w‖∞; `None` once the ciphertext has
    /// crossed a serialization boundary.
    noise_log2: Option<f64>,
}

impl PartialEq for Ciphertext {
    fn eq(&self, other: &Self) -> bool {
        self.params_id == other.params_id && self.polys == other.polys
    }
}
impl Eq for Ciphertext {}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Ciphertext(params={:08x}, k={}, c0[0]={})",
            self.params_id,
            self.polys.len(),
            self.polys[0][0]
        )
    }
}

fn sample_ternary<R: RngCore>(n: usize, q: u64, rng: &mut R) -> Vec<u64> {
    (0..n).map(|_| lift(rng.gen_range(-1i64..=1), q)).collect()
}

fn sample_gaussian<R: RngCore>(n: usize, params: &FheParams, rng: &mut R) -> Vec<u64> {
    let sigma = params.sigma();
    let normal = Normal::new(0.0, sigma).expect("sigma validated at construction");
    let bound = (6.0 * sigma).ceil();
    (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng).round();
            if x.abs() <= bound {
                break lift(x as i64, params.q());
            }
        })
        .collect()
}

fn sample_uniform<R: RngCore>(n: usize, q: u64, rng: &mut R) -> Vec<u64> {
    (0..n).map(|_| rng.gen_range(0..q)).collect()
}

fn mul_with(params: &FheParams, a: &[u64], b_ntt: Option<&[u64]>, b: &[u64]) -> Vec<u64> {
    let q = params.q();
    match (params.ntt(), b_ntt) {
        (Some(t), Some(bn)) => {
            let mut x = t.to_ntt(a);
            for (xi, yi) in x.iter_mut().zip(bn) {
                *xi = mul_mod(*xi, *yi, q);
            }
            t.inverse(&mut x);
            x
        }
        _ => poly_mul(a, b, q, params.ntt()),
    }
}

/// Secret s ternary; public key `(a, b = −a·s + e)`.
pub fn keygen<R: RngCore + CryptoRng>(params: &FheParams, rng: &mut R) -> FheKeyPair {
    let (n, q) = (params.n(), params.q());
    let s = sample_ternary(n, q, rng);
    let a = sample_uniform(n, q, rng);
    let e = sample_gaussian(n, params, rng);
    FheKeyPair::from_parts(params, s, a, e)
}

impl FheKeyPair {
    fn from_parts(params: &FheParams, s: Vec<u64>, a: Vec<u64>, e: Vec<u64>) -> Self {
        let q = params.q();
        let s_ntt = params.ntt().map(|t| t.to_ntt(&s));
        let a_s = mul_with(params, &a, s_ntt.as_deref(), &s);
        let b = poly_add(&poly_neg(&a_s, q), &e, q);
        let secret = FheSecretKey {
            params: params.clone(),
            s,
            s_ntt,
        };
        FheKeyPair {
            public: FhePublicKey::new(params, a, b),
            secret,
        }
    }

    pub fn params(&self) -> &FheParams {
        &self.public.params
    }

    /// `params-id(4) ‖ s as n signed bytes ‖ a ‖ b` (8-byte words, big-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.public.params;
        let q = p.q();
        let mut out = Vec::with_capacity(4 + p.n() * 17);
        out.extend_from_slice(&p.id().to_be_bytes());
        for &c in &self.secret.s {
            let v: i8 = if c == 0 { 0 } else if c == 1 { 1 } else { debug_assert_eq!(c, q - 1); -1 };
            out.push(v as u8);
        }
        for w in self.public.a.iter().chain(&self.public.b) {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out
    }

    pub fn from_bytes(params: &FheParams, bytes: &[u8]) -> Result<Self, FheError> {
        let (n, q) = (params.n(), params.q());
        if bytes.len() != 4 + n + 16 * n {
            return Err(FheError::Decode(format!("key pair: unexpected length {}", bytes.len())));
        }
        let id = u32::from_be_bytes(bytes[..4].try_into().unwrap());
        if id != params.id() {
            return Err(FheError::ParamsMismatch(id, params.id()));
        }
        let s = bytes[4..4 + n]
            .iter()
            .map(|&b| match b as i8 {
                v @ -1..=1 => Ok(lift(v as i64, q)),
                v => Err(FheError::Decode(format!("secret coefficient {v} is not ternary"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let words = read_words(&bytes[4 + n..], q)?;
        let (a, b) = words.split_at(n);
        let secret = FheSecretKey {
            params: params.clone(),
            s_ntt: params.ntt().map(|t| t.to_ntt(&s)),
            s,
        };
        Ok(FheKeyPair {
            public: FhePublicKey::new(params, a.to_vec(), b.to_vec()),
            secret,
        })
    }
}

impl FhePublicKey {
    fn new(params: &FheParams, a: Vec<u64>, b: Vec<u64>) -> Self {
        FhePublicKey {
            params: params.clone(),
            a_ntt: params.ntt().map(|t| t.to_ntt(&a)),
            b_ntt: params.ntt().map(|t| t.to_ntt(&b)),
            a,
            b,
        }
    }

    pub fn params(&self) -> &FheParams {
        &self.params
    }
}

impl FheSecretKey {
    pub fn params(&self) -> &FheParams {
        &self.params
    }
}

fn read_words(bytes: &[u8], q: u64) -> Result<Vec<u64>, FheError> {
    bytes
        .chunks_exact(8)
        .map(|c| {
            let w = u64::from_be_bytes(c.try_into().unwrap());
            if w >= q {
                Err(FheError::Decode(format!("coefficient {w} not reduced mod q")))
            } else {
                Ok(w)
            }
        })
        .collect()
}

/// `c = (b·u + e₁ + Δ·m, a·u + e₂)` with fresh ternary u and Gaussian e₁, e₂.
pub fn encrypt<R: RngCore + CryptoRng>(
    pk: &FhePublicKey,
    m: &Plaintext,
    rng: &mut R,
) -> Result<Ciphertext, FheError> {
    let params = &pk.params;
    m.check(params)?;
    let (n, q) = (params.n(), params.q());
    let u = sample_ternary(n, q, rng);
    let e1 = sample_gaussian(n, params, rng);
    let e2 = sample_gaussian(n, params, rng);
    let (bu, au) = match (params.ntt(), &pk.a_ntt, &pk.b_ntt) {
        (Some(t), Some(an), Some(bn)) => {
            let un = t.to_ntt(&u);
            let mut bu: Vec<u64> = un.iter().zip(bn).map(|(&x, &y)| mul_mod(x, y, q)).collect();
            let mut au: Vec<u64> = un.iter().zip(an).map(|(&x, &y)| mul_mod(x, y, q)).collect();
            t.inverse(&mut bu);
            t.inverse(&mut au);
            (bu, au)
        }
        _ => (poly_mul(&pk.b, &u, q, None), poly_mul(&pk.a, &u, q, None)),
    };
    let delta = params.delta();
    let c0: Vec<u64> = (0..n)
        .map(|i| add_mod(add_mod(bu[i], e1[i], q), mul_mod(delta, m.coeffs[i], q), q))
        .collect();
    let c1 = poly_add(&au, &e2, q);
    Ok(Ciphertext {
        params_id: params.id(),
        polys: vec![c0, c1],
        noise_log2: Some(params.fresh_noise_log2()),
    })
}

fn phase(sk: &FheSecretKey, c: &Ciphertext) -> Result<Vec<u64>, FheError> {
    let params = &sk.params;
    if c.params_id != params.id() {
        return Err(FheError::KeyMismatch);
    }
    let q = params.q();
    let mut acc = c.polys[0].clone();
    let mut s_pow: Option<Vec<u64>> = None;
    for poly in &c.polys[1..] {
        s_pow = Some(match s_pow {
            None => sk.s.clone(),
            Some(prev) => mul_with(params, &prev, sk.s_ntt.as_deref(), &sk.s),
        });
        let sp = s_pow.as_ref().unwrap();
        let term = match (params.ntt(), &sk.s_ntt, c.polys.len()) {
            (Some(_), Some(sn), 2) => mul_with(params, poly, Some(sn), sp),
            _ => poly_mul(poly, sp, q, params.ntt()),
        };
        acc = poly_add(&acc, &term, q);
    }
    Ok(acc)
}

/// `m_i = ⌈(t/q)·v_i⌋ mod t`.
pub fn decrypt(sk: &FheSecretKey, c: &Ciphertext) -> Result<Plaintext, FheError> {
    let params = &sk.params;
    let v = phase(sk, c)?;
    let (q, t) = (params.q() as u128, params.t() as u128);
    let coeffs = v
        .iter()
        .map(|&vi| (((2 * t * vi as u128 + q) / (2 * q)) % t) as u64)
        .collect();
    Ok(Plaintext { coeffs })
}

/// Measured invariant-noise budget in bits; ≤ 0 means decryption is expected
/// to fail on the next noise increase (or already has).
pub fn noise_budget(sk: &FheSecretKey, c: &Ciphertext) -> Result<i64, FheError> {
    let params = &sk.params;
    let v = phase(sk, c)?;
    let (q, t) = (params.q(), params.t());
    let max = v
        .iter()
        .map(|&vi| {
            let w = ((t as u128 * vi as u128) % q as u128) as u64;
            w.min(q - w)
        })
        .max()
        .unwrap_or(0)
        .max(1);
    Ok(((q as f64 / 2.0).log2() - (max as f64).log2()).floor() as i64)
}

impl Ciphertext {
    pub fn params_id(&self) -> u32 {
        self.params_id
    }

    pub fn len(&self) -> usize {
        self.polys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polys.is_empty()
    }

    pub fn polys(&self) -> &[Vec<u64>] {
        &self.polys
    }

    /// The all-zero ciphertext: a noiseless encryption of 0.
    pub fn zero(params: &FheParams) -> Self {
        Ciphertext {
            params_id: params.id(),
            polys: vec![vec![0; params.n()]; 2],
            noise_log2: Some(0.0),
        }
    }

    /// Heuristic remaining budget from the tracked noise bound, if known.
    pub fn estimated_budget(&self, params: &FheParams) -> Option<f64> {
        self.noise_log2.map(|b| params.max_noise_log2() - b)
    }

    /// Treat the ciphertext as freshly encrypted for noise tracking
    /// (used on ciphertexts received over the wire).
    pub fn assume_fresh(mut self, params: &FheParams) -> Self {
        self.noise_log2 = Some(params.fresh_noise_log2());
        self
    }

    /// `params-id(4) ‖ k(2) ‖ k·n coefficient words`, big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.polys[0].len();
        let mut out = Vec::with_capacity(6 + 8 * n * self.polys.len());
        out.extend_from_slice(&self.params_id.to_be_bytes());
        out.extend_from_slice(&(self.polys.len() as u16).to_be_bytes());
        for p in &self.polys {
            for w in p {
                out.extend_from_slice(&w.to_be_bytes());
            }
        }
        out
    }

    pub fn serialized_len(params: &FheParams, k: usize) -> usize {
        6 + 8 * params.n() * k
    }

    /// Parses one ciphertext from the front of `bytes`; returns it and the
    /// number of bytes consumed.
    pub fn read_from(params: &FheParams, bytes: &[u8]) -> Result<(Self, usize), FheError> {
        if bytes.len() < 6 {
            return Err(FheError::Decode("ciphertext header truncated".into()));
        }
        let id = u32::from_be_bytes(bytes[..4].try_into().unwrap());
        if id != params.id() {
            return Err(FheError::ParamsMismatch(id, params.id()));
        }
        let k = u16::from_be_bytes(bytes[4..6].try_into().unwrap()) as usize;
        if k < 2 {
            return Err(FheError::Decode(format!("ciphertext with {k} polynomials")));
        }
        let n = params.n();
        let total = Self::serialized_len(params, k);
        if bytes.len() < total {
            return Err(FheError::Decode("ciphertext body truncated".into()));
        }
        let words = read_words(&bytes[6..total], params.q())?;
        let polys = words.chunks_exact(n).map(|c| c.to_vec()).collect();
        Ok((
            Ciphertext {
                params_id: id,
                polys,
                noise_log2: None,
            },
            total,
        ))
    }

    pub fn from_bytes(params: &FheParams, bytes: &[u8]) -> Result<Self, FheError> {
        let (c, used) = Self::read_from(params, bytes)?;
        if used != bytes.len() {
            return Err(FheError::Decode(format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(c)
    }
}

fn check_id(params: &FheParams, c: &Ciphertext) -> Result<(), FheError> {
    if c.params_id != params.id() {
        return Err(FheError::ParamsMismatch(c.params_id, params.id()));
    }
    Ok(())
}

fn log2_sum(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (1.0 + (lo - hi).exp2()).log2()
}

/// Homomorphic addition. The shorter operand is zero-padded.
pub fn add(params: &FheParams, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, FheError> {
    check_id(params, a)?;
    check_id(params, b)?;
    let q = params.q();
    let k = a.polys.len().max(b.polys.len());
    let zero = vec![0u64; params.n()];
    let polys = (0..k)
        .map(|i| {
            let x = a.polys.get(i).unwrap_or(&zero);
            let y = b.polys.get(i).unwrap_or(&zero);
            poly_add(x, y, q)
        })
        .collect();
    Ok(Ciphertext {
        params_id: a.params_id,
        polys,
        noise_log2: a.noise_log2.zip(b.noise_log2).map(|(x, y)| log2_sum(x, y)),
    })
}

/// Adds `Δ·m` to the first component.
pub fn add_plain(params: &FheParams, c: &Ciphertext, m: &Plaintext) -> Result<Ciphertext, FheError> {
    check_id(params, c)?;
    m.check(params)?;
    let (q, delta) = (params.q(), params.delta());
    let mut out = c.clone();
    for (x, &mi) in out.polys[0].iter_mut().zip(&m.coeffs) {
        *x = add_mod(*x, mul_mod(delta, mi, q), q);
    }
    if m.coeffs.iter().any(|&x| x != 0) {
        out.noise_log2 = out.noise_log2.map(|b| log2_sum(b, params.rounding_noise_log2()));
    }
    Ok(out)
}

fn l1_log2(m: &Plaintext) -> f64 {
    let l1: f64 = m.coeffs.iter().map(|&x| x as f64).sum();
    l1.max(1.0).log2()
}

/// Multiplies every component by the plaintext polynomial m.
pub fn mul_plain(params: &FheParams, c: &Ciphertext, m: &Plaintext) -> Result<Ciphertext, FheError> {
    check_id(params, c)?;
    m.check(params)?;
    let q = params.q();
    let sparse: Vec<(usize, u64)> = m
        .coeffs
        .iter()
        .enumerate()
        .filter(|(_, &x)| x != 0)
        .map(|(i, &x)| (i, x))
        .collect();
    let polys = if sparse.len() <= 4 || params.ntt().is_none() {
        if sparse.len() == 1 && sparse[0].0 == 0 {
            let s = sparse[0].1;
            c.polys.iter().map(|p| p.iter().map(|&x| mul_mod(x, s, q)).collect()).collect()
        } else {
            c.polys.iter().map(|p| ring::negacyclic_sparse(p, &sparse, q)).collect()
        }
    } else {
        let t = params.ntt().unwrap();
        let mn = t.to_ntt(&m.coeffs);
        c.polys
            .iter()
            .map(|p| {
                let mut x = t.to_ntt(p);
                for (xi, yi) in x.iter_mut().zip(&mn) {
                    *xi = mul_mod(*xi, *yi, q);
                }
                t.inverse(&mut x);
                x
            })
            .collect()
    };
    Ok(Ciphertext {
        params_id: c.params_id,
        polys,
        noise_log2: c.noise_log2.map(|b| b + l1_log2(m)),
    })
}

/// A plaintext held in NTT form for repeated products.
#[derive(Clone)]
pub struct PreparedPlaintext {
    ntt: Vec<u64>,
    l1_log2: f64,
}

/// A ciphertext held in NTT form.
pub struct PreparedCiphertext {
    ntt: Vec<Vec<u64>>,
    noise_log2: Option<f64>,
}

impl PreparedPlaintext {
    /// Requires an NTT-friendly parameter set.
    pub fn new(params: &FheParams, m: &Plaintext) -> Result<Self, FheError> {
        m.check(params)?;
        let t = params
            .ntt()
            .ok_or_else(|| FheError::InvalidParams("prepared products need an NTT-friendly q".into()))?;
        Ok(PreparedPlaintext {
            ntt: t.to_ntt(&m.coeffs),
            l1_log2: l1_log2(m),
        })
    }
}

impl PreparedCiphertext {
    pub fn new(params: &FheParams, c: &Ciphertext) -> Result<Self, FheError> {
        check_id(params, c)?;
        let t = params
            .ntt()
            .ok_or_else(|| FheError::InvalidParams("prepared products need an NTT-friendly q".into()))?;
        Ok(PreparedCiphertext {
            ntt: c.polys.iter().map(|p| t.to_ntt(p)).collect(),
            noise_log2: c.noise_log2,
        })
    }
}

/// `Σ_j mul_plain(c_j, m_j)`, folded with [`add`]. Bit-identical to the
/// explicit fold; products are accumulated in the NTT domain.
pub fn dot_plain(
    params: &FheParams,
    cts: &[PreparedCiphertext],
    pts: &[&PreparedPlaintext],
) -> Result<Ciphertext, FheError> {
    if cts.len() != pts.len() || cts.is_empty() {
        return Err(FheError::InvalidParams(format!(
            "dot product over {} ciphertexts and {} plaintexts",
            cts.len(),
            pts.len()
        )));
    }
    let t = params
        .ntt()
        .ok_or_else(|| FheError::InvalidParams("prepared products need an NTT-friendly q".into()))?;
    let (n, q) = (params.n(), params.q());
    let qq = q as u128;
    let k = cts.iter().map(|c| c.ntt.len()).max().unwrap();
    let mut acc = vec![vec![0u128; n]; k];
    // each term is below q² < 2^124, so reduce every 8 additions
    for (step, (c, m)) in cts.iter().zip(pts).enumerate() {
        for (a, p) in acc.iter_mut().zip(&c.ntt) {
            for i in 0..n {
                a[i] += p[i] as u128 * m.ntt[i] as u128;
            }
        }
        if step % 8 == 7 {
            for a in acc.iter_mut() {
                for x in a.iter_mut() {
                    *x %= qq;
                }
            }
        }
    }
    let polys = acc
        .into_iter()
        .map(|a| {
            let mut v: Vec<u64> = a.into_iter().map(|x| (x % qq) as u64).collect();
            t.inverse(&mut v);
            v
        })
        .collect();
    let noise_log2 = cts
        .iter()
        .zip(pts)
        .map(|(c, m)| c.noise_log2.map(|b| b + m.l1_log2))
        .try_fold(f64::NEG_INFINITY, |acc, b| b.map(|b| log2_sum(acc, b)));
    Ok(Ciphertext {
        params_id: params.id(),
        polys,
        noise_log2,
    })
}

/// Adds `k·Δ` to the constant coefficient: shifts the decrypted constant
/// term by k without touching the noise.
pub fn shift_constant(params: &FheParams, c: &Ciphertext, k: u64) -> Ciphertext {
    let q = params.q();
    let mut out = c.clone();
    let d = mul_mod(params.delta(), k % params.t(), q);
    out.polys[0][0] = add_mod(out.polys[0][0], d, q);
    out
}

#[cfg(test)]
mod tests;
