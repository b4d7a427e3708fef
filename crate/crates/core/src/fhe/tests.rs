use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn random_values(rng: &mut ChaCha20Rng, len: usize, t: u64) -> Vec<u64> {
    (0..len).map(|_| rng.gen_range(0..t)).collect()
}

/// Plaintext-ring product mod (X^n + 1, t) evaluated with signed integers.
fn plain_negacyclic(a: &[u64], b: &[u64], t: u64) -> Vec<u64> {
    let n = a.len();
    let mut out = vec![0i128; n];
    for i in 0..n {
        for j in 0..n {
            let p = a[i] as i128 * b[j] as i128;
            if i + j < n {
                out[i + j] += p;
            } else {
                out[i + j - n] -= p;
            }
        }
    }
    out.into_iter().map(|x| x.rem_euclid(t as i128) as u64).collect()
}

#[test]
fn zero_roundtrip() {
    let p = FheParams::desk();
    let mut r = rng(1);
    let kp = keygen(&p, &mut r);
    let c = encrypt(&kp.public, &Plaintext::constant(&p, 0).unwrap(), &mut r).unwrap();
    assert_eq!(decrypt(&kp.secret, &c).unwrap().coeffs(), vec![0; p.n()].as_slice());
}

#[test]
fn random_plaintexts_roundtrip_under_fresh_keys() {
    let p = FheParams::desk();
    let mut r = rng(2);
    for _ in 0..100 {
        let kp = keygen(&p, &mut r);
        let m = Plaintext::new(&p, &random_values(&mut r, p.n(), p.t())).unwrap();
        let c = encrypt(&kp.public, &m, &mut r).unwrap();
        assert_eq!(decrypt(&kp.secret, &c).unwrap(), m);
    }
}

#[test]
fn exhaustive_single_coefficient_scan_toy() {
    let p = FheParams::toy();
    let mut r = rng(3);
    let kp = keygen(&p, &mut r);
    for pos in 0..p.n() {
        for v in 0..p.t() {
            let mut m = vec![0; p.n()];
            m[pos] = v;
            let m = Plaintext::new(&p, &m).unwrap();
            let c = encrypt(&kp.public, &m, &mut r).unwrap();
            assert_eq!(decrypt(&kp.secret, &c).unwrap(), m, "pos {pos} value {v}");
        }
    }
}

#[test]
fn encryptions_are_randomized() {
    let p = FheParams::desk();
    let mut r = rng(4);
    let kp = keygen(&p, &mut r);
    let m = Plaintext::constant(&p, 42).unwrap();
    let c1 = encrypt(&kp.public, &m, &mut r).unwrap();
    let c2 = encrypt(&kp.public, &m, &mut r).unwrap();
    assert_ne!(c1, c2);
    assert_eq!(decrypt(&kp.secret, &c1).unwrap(), decrypt(&kp.secret, &c2).unwrap());
}

#[test]
fn plaintext_space_boundary() {
    let p = FheParams::toy();
    let mut r = rng(5);
    let kp = keygen(&p, &mut r);
    assert_eq!(
        Plaintext::new(&p, &[1, 17]).unwrap_err(),
        FheError::PlaintextSpaceViolation { index: 1, value: 17, t: 17 }
    );
    let mut raw = vec![0; 16];
    raw[5] = 17;
    assert!(matches!(
        encrypt(&kp.public, &Plaintext::from_raw(raw), &mut r),
        Err(FheError::PlaintextSpaceViolation { index: 5, .. })
    ));
    assert!(Plaintext::new(&p, &[16]).is_ok());
}

#[test]
fn invalid_params_rejected_by_generation() {
    assert!(FheParams::new(1024, 65537, 65537, 3.2).is_err());
    assert!(FheParams::new(1000, Q55, 65537, 3.2).is_err());
}

#[test]
fn small_arithmetic_examples() {
    let p = FheParams::toy();
    let mut r = rng(6);
    let kp = keygen(&p, &mut r);
    let c3 = encrypt(&kp.public, &Plaintext::constant(&p, 3).unwrap(), &mut r).unwrap();
    let c4 = encrypt(&kp.public, &Plaintext::constant(&p, 4).unwrap(), &mut r).unwrap();
    let sum = decrypt(&kp.secret, &add(&p, &c3, &c4).unwrap()).unwrap();
    assert_eq!(sum.coeffs()[0], 7);
    let five = Plaintext::constant(&p, 5).unwrap();
    let prod = decrypt(&kp.secret, &mul_plain(&p, &c3, &five).unwrap()).unwrap();
    assert_eq!(prod.coeffs()[0], 15);
    let one = Plaintext::constant(&p, 1).unwrap();
    let same = mul_plain(&p, &c3, &one).unwrap();
    assert_eq!(decrypt(&kp.secret, &same).unwrap(), decrypt(&kp.secret, &c3).unwrap());
    // 9 + 9 wraps mod 17
    let c9 = encrypt(&kp.public, &Plaintext::constant(&p, 9).unwrap(), &mut r).unwrap();
    assert_eq!(decrypt(&kp.secret, &add(&p, &c9, &c9).unwrap()).unwrap().coeffs()[0], 1);
}

#[test]
fn homomorphism_oracle_desk() {
    let p = FheParams::desk();
    let t = p.t();
    let mut r = rng(7);
    let kp = keygen(&p, &mut r);
    let mut checked = 0;
    for trial in 0..1000 {
        let m1 = random_values(&mut r, p.n(), t);
        let m2 = random_values(&mut r, p.n(), t);
        let k = r.gen_range(0..t);
        let c1 = encrypt(&kp.public, &Plaintext::new(&p, &m1).unwrap(), &mut r).unwrap();
        let c2 = encrypt(&kp.public, &Plaintext::new(&p, &m2).unwrap(), &mut r).unwrap();
        let p2 = Plaintext::new(&p, &m2).unwrap();
        let outs = [
            (add(&p, &c1, &c2).unwrap(), m1.iter().zip(&m2).map(|(a, b)| (a + b) % t).collect::<Vec<_>>()),
            (add_plain(&p, &c1, &p2).unwrap(), m1.iter().zip(&m2).map(|(a, b)| (a + b) % t).collect()),
            (
                mul_plain(&p, &c1, &Plaintext::constant(&p, k).unwrap()).unwrap(),
                m1.iter().map(|a| a * k % t).collect(),
            ),
        ];
        for (c, expect) in outs {
            if noise_budget(&kp.secret, &c).unwrap() > 0 {
                assert_eq!(decrypt(&kp.secret, &c).unwrap().coeffs(), expect.as_slice(), "trial {trial}");
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 3000);
}

#[test]
fn polynomial_mul_plain_matches_plaintext_ring() {
    let p = FheParams::toy();
    let mut r = rng(8);
    let kp = keygen(&p, &mut r);
    for _ in 0..200 {
        let a = random_values(&mut r, p.n(), p.t());
        let b = random_values(&mut r, p.n(), p.t());
        let c = encrypt(&kp.public, &Plaintext::new(&p, &a).unwrap(), &mut r).unwrap();
        let prod = mul_plain(&p, &c, &Plaintext::new(&p, &b).unwrap()).unwrap();
        assert_eq!(decrypt(&kp.secret, &prod).unwrap().coeffs(), plain_negacyclic(&a, &b, p.t()).as_slice());
    }
}

#[test]
fn sparse_and_dense_mul_plain_agree() {
    let p = FheParams::desk();
    let mut r = rng(9);
    let kp = keygen(&p, &mut r);
    let c = encrypt(&kp.public, &Plaintext::new(&p, &random_values(&mut r, p.n(), p.t())).unwrap(), &mut r).unwrap();
    let mut m = vec![0u64; p.n()];
    m[3] = 7;
    m[900] = 11;
    let m = Plaintext::new(&p, &m).unwrap();
    let fast = mul_plain(&p, &c, &m).unwrap();
    let slow: Vec<Vec<u64>> = c.polys().iter().map(|x| ring::negacyclic_schoolbook(x, m.coeffs(), p.q())).collect();
    assert_eq!(fast.polys(), slow.as_slice());
    let dense = Plaintext::new(&p, &random_values(&mut r, p.n(), p.t())).unwrap();
    let fast = mul_plain(&p, &c, &dense).unwrap();
    let slow: Vec<Vec<u64>> = c.polys().iter().map(|x| ring::negacyclic_schoolbook(x, dense.coeffs(), p.q())).collect();
    assert_eq!(fast.polys(), slow.as_slice());
}

#[test]
fn non_ntt_modulus_is_functional() {
    let p = FheParams::new(64, (1 << 50) + 1, 257, 3.2).unwrap();
    assert!(!p.has_ntt());
    let mut r = rng(10);
    let kp = keygen(&p, &mut r);
    let a = random_values(&mut r, 64, 257);
    let c = encrypt(&kp.public, &Plaintext::new(&p, &a).unwrap(), &mut r).unwrap();
    assert_eq!(decrypt(&kp.secret, &c).unwrap().coeffs(), a.as_slice());
    let b = random_values(&mut r, 64, 257);
    let prod = mul_plain(&p, &c, &Plaintext::new(&p, &b).unwrap()).unwrap();
    assert_eq!(decrypt(&kp.secret, &prod).unwrap().coeffs(), plain_negacyclic(&a, &b, 257).as_slice());
}

#[test]
fn mixed_size_addition_zero_pads() {
    let p = FheParams::toy();
    let mut r = rng(11);
    let kp = keygen(&p, &mut r);
    let c = encrypt(&kp.public, &Plaintext::constant(&p, 2).unwrap(), &mut r).unwrap();
    let mut wide = Ciphertext::zero(&p);
    wide.polys.push(vec![0; p.n()]);
    let s = add(&p, &c, &wide).unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(decrypt(&kp.secret, &s).unwrap().coeffs()[0], 2);
}

#[test]
fn params_mismatch_is_an_error() {
    let (a, b) = (FheParams::toy(), FheParams::desk());
    let mut r = rng(12);
    let ka = keygen(&a, &mut r);
    let kb = keygen(&b, &mut r);
    let ca = encrypt(&ka.public, &Plaintext::constant(&a, 1).unwrap(), &mut r).unwrap();
    let cb = encrypt(&kb.public, &Plaintext::constant(&b, 1).unwrap(), &mut r).unwrap();
    assert!(matches!(add(&b, &ca, &cb), Err(FheError::ParamsMismatch(..))));
    assert_eq!(noise_budget(&kb.secret, &ca).unwrap_err(), FheError::KeyMismatch);
    assert_eq!(decrypt(&kb.secret, &ca).unwrap_err(), FheError::KeyMismatch);
}

#[test]
fn operators_are_bitwise_deterministic() {
    let p = FheParams::desk();
    let run = || {
        let mut r = rng(13);
        let kp = keygen(&p, &mut r);
        let c1 = encrypt(&kp.public, &Plaintext::constant(&p, 5).unwrap(), &mut r).unwrap();
        let c2 = encrypt(&kp.public, &Plaintext::constant(&p, 6).unwrap(), &mut r).unwrap();
        let m = Plaintext::new(&p, &random_values(&mut r, p.n(), p.t())).unwrap();
        (c1.clone(), c2.clone(), m.clone(), add(&p, &c1, &c2).unwrap().to_bytes(), mul_plain(&p, &c1, &m).unwrap().to_bytes())
    };
    let (c1, c2, m, s1, m1) = run();
    let (_, _, _, s2, m2) = run();
    assert_eq!(s1, s2);
    assert_eq!(m1, m2);
    // same inputs, repeated evaluation, same bytes
    assert_eq!(add(&p, &c1, &c2).unwrap().to_bytes(), s1);
    assert_eq!(mul_plain(&p, &c1, &m).unwrap().to_bytes(), m1);
}

#[test]
fn fresh_budget_exceeds_ten_bits() {
    let p = FheParams::desk();
    let mut r = rng(14);
    let kp = keygen(&p, &mut r);
    let min = (0..100)
        .map(|_| {
            let m = Plaintext::new(&p, &random_values(&mut r, p.n(), p.t())).unwrap();
            noise_budget(&kp.secret, &encrypt(&kp.public, &m, &mut r).unwrap()).unwrap()
        })
        .min()
        .unwrap();
    assert!(min > 10, "minimum fresh budget {min}");
}

#[test]
fn tracked_estimate_is_conservative() {
    let p = FheParams::desk();
    let mut r = rng(15);
    let kp = keygen(&p, &mut r);
    let m = Plaintext::new(&p, &random_values(&mut r, p.n(), p.t())).unwrap();
    let c = encrypt(&kp.public, &m, &mut r).unwrap();
    let w = Plaintext::new(&p, &random_values(&mut r, p.n(), 256)).unwrap();
    for c in [c.clone(), mul_plain(&p, &c, &w).unwrap(), add_plain(&p, &c, &m).unwrap()] {
        let est = c.estimated_budget(&p).unwrap();
        let measured = noise_budget(&kp.secret, &c).unwrap() as f64;
        assert!(est <= measured + 1.0, "estimate {est} vs measured {measured}");
    }
}

#[test]
fn doubling_exhausts_budget_and_breaks_decryption() {
    let p = FheParams::desk();
    let t = p.t();
    let mut r = rng(16);
    let kp = keygen(&p, &mut r);
    let m = random_values(&mut r, p.n(), t);
    let mut c = encrypt(&kp.public, &Plaintext::new(&p, &m).unwrap(), &mut r).unwrap();
    let mut scale = 1u64;
    let mut prev = noise_budget(&kp.secret, &c).unwrap();
    let mut doublings = 0;
    while noise_budget(&kp.secret, &c).unwrap() > 0 {
        c = add(&p, &c, &c).unwrap();
        scale = scale * 2 % t;
        doublings += 1;
        let b = noise_budget(&kp.secret, &c).unwrap();
        assert!(b <= prev);
        prev = b;
        assert!(doublings < 64);
    }
    c = add(&p, &c, &c).unwrap();
    scale = scale * 2 % t;
    let expect: Vec<u64> = m.iter().map(|x| x * scale % t).collect();
    assert_ne!(decrypt(&kp.secret, &c).unwrap().coeffs(), expect.as_slice());
}

#[test]
fn ind_cpa_smoke() {
    let p = FheParams::desk();
    let mut r = rng(17);
    let kp = keygen(&p, &mut r);
    let zero = Plaintext::constant(&p, 0).unwrap();
    let one = Plaintext::constant(&p, 1).unwrap();
    let trials = 1000;
    let mut seen = std::collections::HashSet::new();
    let mut sums = [[0f64; 8]; 2];
    let mut sq = [[0f64; 8]; 2];
    for _ in 0..trials {
        for (which, m) in [&zero, &one].into_iter().enumerate() {
            let bytes = encrypt(&kp.public, m, &mut r).unwrap().to_bytes();
            // skip the fixed 6-byte header
            let head: [u8; 8] = bytes[6..14].try_into().unwrap();
            assert!(seen.insert(head), "repeated ciphertext prefix");
            for (i, &b) in head.iter().enumerate() {
                sums[which][i] += b as f64;
                sq[which][i] += (b as f64).powi(2);
            }
        }
    }
    let n = trials as f64;
    for i in 0..8 {
        let mean = |w: usize| sums[w][i] / n;
        let var = |w: usize| sq[w][i] / n - mean(w).powi(2);
        let se = ((var(0) + var(1)) / n).sqrt();
        let diff = (mean(0) - mean(1)).abs();
        assert!(diff <= 3.0 * se.max(1e-9), "byte {i}: diff {diff} se {se}");
    }
}

#[test]
fn encode_decode_vectors() {
    let p = FheParams::desk();
    let mut r = rng(18);
    for len in [0usize, 1, 17, 1024] {
        let v = random_values(&mut r, len, p.t());
        let m = encode_vector(&p, &v).unwrap();
        assert_eq!(decode_vector(&m, len), v);
        assert!(m.coeffs()[len..].iter().all(|&x| x == 0));
    }
    assert_eq!(encode_vector(&p, &[]).unwrap().coeffs(), vec![0; 1024].as_slice());
    assert_eq!(
        encode_vector(&p, &vec![0; 1025]).unwrap_err(),
        FheError::CapacityExceeded { len: 1025, n: 1024 }
    );
    assert!(matches!(
        encode_vector(&p, &[65537]),
        Err(FheError::PlaintextSpaceViolation { value: 65537, .. })
    ));
}

#[test]
fn ciphertext_serialization() {
    let p = FheParams::desk();
    let mut r = rng(19);
    let kp = keygen(&p, &mut r);
    let c = encrypt(&kp.public, &Plaintext::constant(&p, 9).unwrap(), &mut r).unwrap();
    let bytes = c.to_bytes();
    assert_eq!(bytes.len(), 6 + 2 * 8 * 1024);
    assert_eq!(bytes.len(), Ciphertext::serialized_len(&p, 2));
    assert_eq!(&bytes[..4], &p.id().to_be_bytes());
    assert_eq!(&bytes[4..6], &[0, 2]);
    let back = Ciphertext::from_bytes(&p, &bytes).unwrap();
    assert_eq!(back, c);
    assert!(back.estimated_budget(&p).is_none());
    assert_eq!(decrypt(&kp.secret, &back).unwrap().coeffs()[0], 9);
    let mut bad = bytes.clone();
    bad[6..14].copy_from_slice(&p.q().to_be_bytes());
    assert!(matches!(Ciphertext::from_bytes(&p, &bad), Err(FheError::Decode(_))));
    assert!(Ciphertext::from_bytes(&p, &bytes[..bytes.len() - 1]).is_err());
    let mut one_poly = bytes.clone();
    one_poly[5] = 1;
    assert!(Ciphertext::from_bytes(&p, &one_poly[..6 + 8 * 1024]).is_err());
    assert!(matches!(Ciphertext::from_bytes(&FheParams::toy(), &bytes), Err(FheError::ParamsMismatch(..))));
}

#[test]
fn key_pair_serialization() {
    let p = FheParams::toy();
    let mut r = rng(20);
    let kp = keygen(&p, &mut r);
    let back = FheKeyPair::from_bytes(&p, &kp.to_bytes()).unwrap();
    let c = encrypt(&back.public, &Plaintext::constant(&p, 11).unwrap(), &mut r).unwrap();
    assert_eq!(decrypt(&kp.secret, &c).unwrap().coeffs()[0], 11);
    assert!(FheKeyPair::from_bytes(&FheParams::desk(), &kp.to_bytes()).is_err());
}

#[test]
fn key_residue_is_small() {
    let p = FheParams::desk();
    let mut r = rng(21);
    let kp = keygen(&p, &mut r);
    let q = p.q();
    let a_s = ring::negacyclic_schoolbook(&kp.public.a, &kp.secret.s, q);
    let bound = (6.0 * p.sigma()).ceil() as u64;
    for (b, x) in kp.public.b.iter().zip(&a_s) {
        let e = ring::add_mod(*b, *x, q);
        assert!(e.min(q - e) <= bound);
    }
}

#[test]
fn prepared_dot_product_matches_fold() {
    let p = FheParams::desk();
    let mut r = rng(22);
    let kp = keygen(&p, &mut r);
    let cts: Vec<Ciphertext> = (0..20)
        .map(|i| encrypt(&kp.public, &Plaintext::constant(&p, i).unwrap(), &mut r).unwrap())
        .collect();
    let pts: Vec<Plaintext> = (0..20)
        .map(|_| Plaintext::new(&p, &random_values(&mut r, p.n(), p.t())).unwrap())
        .collect();
    let mut fold = mul_plain(&p, &cts[0], &pts[0]).unwrap();
    for (c, m) in cts.iter().zip(&pts).skip(1) {
        fold = add(&p, &fold, &mul_plain(&p, c, m).unwrap()).unwrap();
    }
    let pc: Vec<PreparedCiphertext> = cts.iter().map(|c| PreparedCiphertext::new(&p, c).unwrap()).collect();
    let pp: Vec<PreparedPlaintext> = pts.iter().map(|m| PreparedPlaintext::new(&p, m).unwrap()).collect();
    let refs: Vec<&PreparedPlaintext> = pp.iter().collect();
    let dot = dot_plain(&p, &pc, &refs).unwrap();
    assert_eq!(dot, fold);
    assert!(dot_plain(&p, &pc[..3], &refs[..2]).is_err());
}

#[test]
fn shift_constant_moves_the_decryption() {
    let p = FheParams::toy();
    let mut r = rng(23);
    let kp = keygen(&p, &mut r);
    let c = encrypt(&kp.public, &Plaintext::constant(&p, 3).unwrap(), &mut r).unwrap();
    let s = shift_constant(&p, &c, 5);
    assert_eq!(decrypt(&kp.secret, &s).unwrap().coeffs()[0], 8);
    assert_ne!(s, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn budget_never_increases(seed in any::<u64>(), k in 0u64..17, ops in proptest::collection::vec(0u8..3, 1..8)) {
        let p = FheParams::toy();
        let mut r = rng(seed);
        let kp = keygen(&p, &mut r);
        let mut c = encrypt(&kp.public, &Plaintext::constant(&p, k).unwrap(), &mut r).unwrap();
        let other = encrypt(&kp.public, &Plaintext::constant(&p, 1).unwrap(), &mut r).unwrap();
        for op in ops {
            let before = c.estimated_budget(&p).unwrap();
            let mb = noise_budget(&kp.secret, &c).unwrap();
            let m = Plaintext::new(&p, &random_values(&mut r, p.n(), p.t())).unwrap();
            c = match op {
                0 => add(&p, &c, &c).unwrap(),
                1 => add_plain(&p, &c, &m).unwrap(),
                _ => mul_plain(&p, &c, &m).unwrap(),
            };
            prop_assert!(c.estimated_budget(&p).unwrap() <= before);
            if op == 0 {
                prop_assert!(noise_budget(&kp.secret, &c).unwrap() <= mb);
            }
            let d = add(&p, &c, &other).unwrap();
            prop_assert!(d.estimated_budget(&p).unwrap() <= c.estimated_budget(&p).unwrap());
        }
    }

    #[test]
    fn encode_roundtrip(values in proptest::collection::vec(0u64..65537, 0..1025)) {
        let p = FheParams::desk();
        let m = encode_vector(&p, &values).unwrap();
        prop_assert_eq!(decode_vector(&m, values.len()), values);
    }
}
