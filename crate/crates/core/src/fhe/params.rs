use std::fmt;
use std::sync::Arc;

use super::ring::{is_prime, NttTables};
use super::FheError;
use crate::crypto::hash_parts;

/// A 55-bit prime with q ≡ 1 (mod 2^14) and q ≡ 1 (mod 65537).
pub const Q55: u64 = 36_028_793_789_300_737;

const MAX_LOG_N: u32 = 15;

struct Inner {
    n: usize,
    q: u64,
    t: u64,
    sigma: f64,
    delta: u64,
    id: u32,
    ntt: Option<NttTables>,
}

/// Immutable, cheaply clonable parameter set.
#[derive(Clone)]
pub struct FheParams(Arc<Inner>);

impl fmt::Debug for FheParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FheParams(n={}, q={}, t={}, sigma={}, id={:08x})",
            self.0.n, self.0.q, self.0.t, self.0.sigma, self.0.id
        )
    }
}

impl PartialEq for FheParams {
    fn eq(&self, other: &Self) -> bool {
        self.0.id == other.0.id
            && (self.0.n, self.0.q, self.0.t) == (other.0.n, other.0.q, other.0.t)
            && self.0.sigma.to_bits() == other.0.sigma.to_bits()
    }
}
impl Eq for FheParams {}

impl FheParams {
    pub fn new(n: usize, q: u64, t: u64, sigma: f64) -> Result<Self, FheError> {
        if !n.is_power_of_two() || n < 2 || n.trailing_zeros() > MAX_LOG_N {
            return Err(FheError::InvalidParams(format!(
                "ring degree {n} must be a power of two in [2, 2^{MAX_LOG_N}]"
            )));
        }
        if !is_prime(t) {
            return Err(FheError::InvalidParams(format!("plaintext modulus {t} is not prime")));
        }
        if t >= q {
            return Err(FheError::InvalidParams(format!("t = {t} must be below q = {q}")));
        }
        if q >= 1 << 62 {
            return Err(FheError::InvalidParams("q must be below 2^62".into()));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(FheError::InvalidParams(format!("sigma = {sigma} must be positive")));
        }
        let id_digest = hash_parts(&[
            b"fhe-params",
            &(n as u64).to_be_bytes(),
            &q.to_be_bytes(),
            &t.to_be_bytes(),
            &sigma.to_bits().to_be_bytes(),
        ]);
        let id = u32::from_be_bytes(id_digest.0[..4].try_into().unwrap());
        Ok(FheParams(Arc::new(Inner {
            n,
            q,
            t,
            sigma,
            delta: q / t,
            id,
            ntt: NttTables::new(n, q),
        })))
    }

    /// n = 1024, q = Q55, t = 65537, σ = 3.2. Not a 128-bit-secure set.
    pub fn desk() -> Self {
        Self::new(1024, Q55, 65537, 3.2).expect("preset is valid")
    }

    /// n = 4096 with the desk moduli; the ring size used in production settings.
    pub fn wide() -> Self {
        Self::new(4096, Q55, 65537, 3.2).expect("preset is valid")
    }

    /// n = 16, t = 17: small enough for exhaustive tests.
    pub fn toy() -> Self {
        Self::new(16, Q55, 17, 3.2).expect("preset is valid")
    }

    pub fn n(&self) -> usize {
        self.0.n
    }

    pub fn q(&self) -> u64 {
        self.0.q
    }

    pub fn t(&self) -> u64 {
        self.0.t
    }

    pub fn sigma(&self) -> f64 {
        self.0.sigma
    }

    /// Δ = ⌊q/t⌋.
    pub fn delta(&self) -> u64 {
        self.0.delta
    }

    pub fn id(&self) -> u32 {
        self.0.id
    }

    pub(crate) fn ntt(&self) -> Option<&NttTables> {
        self.0.ntt.as_ref()
    }

    pub fn has_ntt(&self) -> bool {
        self.0.ntt.is_some()
    }

    /// Bits of payload that always fit below t in one coefficient.
    pub fn bits_per_coeff(&self) -> u32 {
        63 - self.0.t.leading_zeros()
    }

    /// log₂(q/2): decryption is correct while ‖t·v mod q‖∞ stays below this.
    pub(crate) fn max_noise_log2(&self) -> f64 {
        (self.0.q as f64 / 2.0).log2()
    }

    fn r(&self) -> u64 {
        (self.0.q % self.0.t).max(1)
    }

    /// Bound on the invariant-scale noise of a fresh encryption
    /// (six standard deviations of e·u + e₁ + e₂·s, plus the Δ rounding term).
    pub(crate) fn fresh_noise_log2(&self) -> f64 {
        let n = self.0.n as f64;
        let t = self.0.t as f64;
        let r = self.r() as f64;
        let e = 6.0 * self.0.sigma * (1.0 + 4.0 * n / 3.0).sqrt();
        (r * (t - 1.0) + t * e).log2()
    }

    /// Invariant-scale noise added by one plaintext addition.
    pub(crate) fn rounding_noise_log2(&self) -> f64 {
        ((self.r() as f64) * (self.0.t as f64)).log2()
    }
}
