//! Arithmetic in Z_q[X]/(X^n + 1) on coefficient vectors.
//!
//! When q is a prime with q ≡ 1 (mod 2n) products go through a negacyclic
//! NTT; otherwise through schoolbook multiplication. Both are exact, so the
//! two routes agree bit for bit.

#[inline]
pub(crate) fn add_mod(a: u64, b: u64, q: u64) -> u64 {
    let s = a + b;
    if s >= q {
        s - q
    } else {
        s
    }
}

#[inline]
pub(crate) fn sub_mod(a: u64, b: u64, q: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        a + q - b
    }
}

#[inline]
pub(crate) fn mul_mod(a: u64, b: u64, q: u64) -> u64 {
    ((a as u128 * b as u128) % q as u128) as u64
}

pub(crate) fn pow_mod(mut base: u64, mut exp: u64, q: u64) -> u64 {
    let mut acc = 1u64 % q;
    base %= q;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, q);
        }
        base = mul_mod(base, base, q);
        exp >>= 1;
    }
    acc
}

/// `x mod q` for a signed value.
#[inline]
pub(crate) fn lift(x: i64, q: u64) -> u64 {
    let r = x.rem_euclid(q as i64);
    r as u64
}

/// Deterministic Miller-Rabin, exact for all 64-bit inputs.
pub(crate) fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n % p == 0 {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut r = 0;
    while d % 2 == 0 {
        d /= 2;
        r += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..r {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[inline]
fn shoup(w: u64, q: u64) -> u64 {
    (((w as u128) << 64) / q as u128) as u64
}

/// `a·w mod q` with precomputed `wp = ⌊w·2^64/q⌋`. Valid for q < 2^63.
#[inline]
fn mul_shoup(a: u64, w: u64, wp: u64, q: u64) -> u64 {
    let hi = ((a as u128 * wp as u128) >> 64) as u64;
    let r = a.wrapping_mul(w).wrapping_sub(hi.wrapping_mul(q));
    if r >= q {
        r - q
    } else {
        r
    }
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

/// Twiddle tables for the negacyclic NTT of length n modulo q.
#[derive(Debug, Clone)]
pub(crate) struct NttTables {
    n: usize,
    q: u64,
    psi_rev: Vec<u64>,
    psi_rev_shoup: Vec<u64>,
    psi_inv_rev: Vec<u64>,
    psi_inv_rev_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

impl NttTables {
    /// Returns `None` unless q is prime and q ≡ 1 (mod 2n).
    pub(crate) fn new(n: usize, q: u64) -> Option<Self> {
        let two_n = 2 * n as u64;
        if !is_prime(q) || (q - 1) % two_n != 0 || q >= 1 << 62 {
            return None;
        }
        let psi = (2..q).find_map(|x| {
            let c = pow_mod(x, (q - 1) / two_n, q);
            (pow_mod(c, n as u64, q) == q - 1).then_some(c)
        })?;
        let psi_inv = pow_mod(psi, q - 2, q);
        let bits = n.trailing_zeros();
        let mut psi_rev = vec![0u64; n];
        let mut psi_inv_rev = vec![0u64; n];
        let (mut p, mut pi) = (1u64, 1u64);
        for i in 0..n {
            let r = bit_reverse(i, bits);
            psi_rev[r] = p;
            psi_inv_rev[r] = pi;
            p = mul_mod(p, psi, q);
            pi = mul_mod(pi, psi_inv, q);
        }
        let n_inv = pow_mod(n as u64, q - 2, q);
        Some(NttTables {
            n,
            q,
            psi_rev_shoup: psi_rev.iter().map(|&w| shoup(w, q)).collect(),
            psi_inv_rev_shoup: psi_inv_rev.iter().map(|&w| shoup(w, q)).collect(),
            psi_rev,
            psi_inv_rev,
            n_inv,
            n_inv_shoup: shoup(n_inv, q),
        })
    }

    pub(crate) fn forward(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = self.q;
        let mut t = self.n;
        let mut m = 1;
        while m < self.n {
            t >>= 1;
            for i in 0..m {
                let j1 = 2 * i * t;
                let (s, sp) = (self.psi_rev[m + i], self.psi_rev_shoup[m + i]);
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = mul_shoup(a[j + t], s, sp, q);
                    a[j] = add_mod(u, v, q);
                    a[j + t] = sub_mod(u, v, q);
                }
            }
            m <<= 1;
        }
    }

    pub(crate) fn inverse(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = self.q;
        let mut t = 1;
        let mut m = self.n;
        while m > 1 {
            let h = m >> 1;
            let mut j1 = 0;
            for i in 0..h {
                let (s, sp) = (self.psi_inv_rev[h + i], self.psi_inv_rev_shoup[h + i]);
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = a[j + t];
                    a[j] = add_mod(u, v, q);
                    a[j + t] = mul_shoup(sub_mod(u, v, q), s, sp, q);
                }
                j1 += 2 * t;
            }
            t <<= 1;
            m = h;
        }
        for x in a.iter_mut() {
            *x = mul_shoup(*x, self.n_inv, self.n_inv_shoup, q);
        }
    }

    pub(crate) fn to_ntt(&self, a: &[u64]) -> Vec<u64> {
        let mut v = a.to_vec();
        self.forward(&mut v);
        v
    }
}

/// Negacyclic schoolbook product. Also the reference the NTT is tested against.
pub(crate) fn negacyclic_schoolbook(a: &[u64], b: &[u64], q: u64) -> Vec<u64> {
    let n = a.len();
    let mut pos = vec![0u128; n];
    let mut neg = vec![0u128; n];
    let qq = q as u128;
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate() {
            let p = (ai as u128 * bj as u128) % qq;
            let k = i + j;
            if k < n {
                pos[k] += p;
            } else {
                neg[k - n] += p;
            }
        }
        // keep the u128 accumulators far from overflow
        if i % 4096 == 4095 {
            for k in 0..n {
                pos[k] %= qq;
                neg[k] %= qq;
            }
        }
    }
    (0..n)
        .map(|k| sub_mod((pos[k] % qq) as u64, (neg[k] % qq) as u64, q))
        .collect()
}

/// Product with a sparse operand given as (degree, coefficient) pairs.
pub(crate) fn negacyclic_sparse(a: &[u64], sparse: &[(usize, u64)], q: u64) -> Vec<u64> {
    let n = a.len();
    let mut out = vec![0u64; n];
    for &(j, c) in sparse {
        for (i, &ai) in a.iter().enumerate() {
            let p = mul_mod(ai, c, q);
            let k = i + j;
            if k < n {
                out[k] = add_mod(out[k], p, q);
            } else {
                out[k - n] = sub_mod(out[k - n], p, q);
            }
        }
    }
    out
}

pub(crate) fn poly_add(a: &[u64], b: &[u64], q: u64) -> Vec<u64> {
    a.iter().zip(b).map(|(&x, &y)| add_mod(x, y, q)).collect()
}

pub(crate) fn poly_neg(a: &[u64], q: u64) -> Vec<u64> {
    a.iter().map(|&x| if x == 0 { 0 } else { q - x }).collect()
}

/// Product in the ring, using the NTT when tables are available.
pub(crate) fn poly_mul(a: &[u64], b: &[u64], q: u64, ntt: Option<&NttTables>) -> Vec<u64> {
    match ntt {
        Some(t) => {
            let mut x = t.to_ntt(a);
            let y = t.to_ntt(b);
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi = mul_mod(*xi, *yi, q);
            }
            t.inverse(&mut x);
            x
        }
        None => negacyclic_schoolbook(a, b, q),
    }
}
