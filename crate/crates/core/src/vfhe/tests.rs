use super::*;
use crate::monitor::Transcript;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn setup(params: &FheParams, seed: u64) -> (ClientKeys, ServerContext, ChaCha20Rng) {
    let mut r = rng(seed);
    let (c, s) = vfhe_gen(params, &mut r);
    (c, s, r)
}

/// Test-only escape hatch: decrypt a raw ciphertext with the client's key.
fn raw_decrypt(c: &ClientKeys, ct: &Ciphertext) -> u64 {
    fhe::decrypt(&c.keys.secret, ct).unwrap().coeffs()[0]
}

#[test]
fn gen_anchors_verify_endorsement() {
    let p = FheParams::toy();
    let (c, s, _) = setup(&p, 1);
    assert!(s.monitor().tpm().endorsement().verify(&c.anchors().manufacturer_pk));
    assert_eq!(c.anchors().monitor, s.monitor().reference());
}

#[test]
fn context_serialization_has_no_signing_key() {
    let p = FheParams::toy();
    let (_, mut s, mut r) = setup(&p, 2);
    let m = s.register_circuit(&Circuit::identity()).unwrap();
    let c = ClientKeys::new(&p, s.anchors(PublicKey([0; 32])), &mut r);
    let x = c.encrypt_value(1, &mut r).unwrap();
    s.eval(&m, &x, [0; 32]).unwrap();
    let bytes = s.snapshot().to_bytes();
    let sk = s.monitor().tpm().secret_key_bytes();
    assert!(!bytes.windows(32).any(|w| w == sk));
}

#[test]
fn independent_gens_have_distinct_keys() {
    let p = FheParams::toy();
    let mut r = rng(3);
    let keys: std::collections::HashSet<[u8; 32]> = (0..10)
        .map(|_| vfhe_gen(&p, &mut r).1.monitor().tpm().endorsement().attestation_pk.0)
        .collect();
    assert_eq!(keys.len(), 10);
}

#[test]
fn enc_delegates() {
    let p = FheParams::desk();
    let (c, _, mut r) = setup(&p, 4);
    let a = c.encrypt_value(3, &mut r).unwrap();
    let b = c.encrypt_value(3, &mut r).unwrap();
    assert_eq!(raw_decrypt(&c, &a), 3);
    assert_ne!(a.to_bytes(), b.to_bytes());
    assert!(matches!(c.encrypt_value(65537, &mut r), Err(FheError::PlaintextSpaceViolation { .. })));
}

#[test]
fn identity_and_doubling_circuits() {
    let p = FheParams::desk();
    let (mut c, mut s, mut r) = setup(&p, 5);
    let id = s.register_circuit(&Circuit::identity()).unwrap();
    let dbl = s.register_circuit(&Circuit::affine(2, 0)).unwrap();
    let x = c.encrypt_value(21, &mut r).unwrap();
    for (m, want) in [(id, 21), (dbl, 42)] {
        let nonce = r.gen();
        let sigs = s.monitor().tpm().signature_count();
        let (y, pi) = s.eval(&m, &x, nonce).unwrap();
        assert_eq!(s.monitor().tpm().signature_count(), sigs + 1);
        let v = c.verify(&y, &x, &pi, nonce, m).unwrap();
        assert_eq!(c.decrypt_values(&v).unwrap(), vec![want]);
    }
    assert_eq!(c.decryption_count(), 2);
}

#[test]
fn evaluation_is_deterministic() {
    let p = FheParams::desk();
    let (c, mut s, mut r) = setup(&p, 6);
    let m = s.register_circuit(&Circuit::affine(7, 3)).unwrap();
    let x = c.encrypt_value(5, &mut r).unwrap();
    let (y1, p1) = s.eval(&m, &x, [9; 32]).unwrap();
    let (y2, p2) = s.eval(&m, &x, [9; 32]).unwrap();
    assert_eq!(y1.to_bytes(), y2.to_bytes());
    assert_eq!(p1.transcript.running_digest(), p2.transcript.running_digest());
}

#[test]
fn unknown_circuit_and_empty_batch() {
    let p = FheParams::toy();
    let (c, mut s, mut r) = setup(&p, 7);
    let x = c.encrypt_value(1, &mut r).unwrap();
    assert!(matches!(s.eval(&Digest::ZERO, &x, [0; 32]), Err(VfheError::UnknownCircuit(_))));
    let m = s.register_circuit(&Circuit::identity()).unwrap();
    assert_eq!(s.eval_batch(&m, &[], [0; 32]).unwrap_err(), VfheError::EmptyBatch);
}

#[test]
fn reencryption_of_correct_value_is_rejected() {
    let p = FheParams::desk();
    let (mut c, mut s, mut r) = setup(&p, 8);
    let m = s.register_circuit(&Circuit::affine(2, 0)).unwrap();
    let x = c.encrypt_value(21, &mut r).unwrap();
    let nonce = r.gen();
    let (_, pi) = s.eval(&m, &x, nonce).unwrap();
    let substitute = c.encrypt_value(42, &mut r).unwrap();
    assert_eq!(c.verify(&substitute, &x, &pi, nonce, m).unwrap_err(), Rejection::OutputMismatch);
    assert_eq!(c.decryption_count(), 0);
    assert_eq!(c.rejection_count(), 1);
}

#[test]
fn equivalent_circuit_with_different_binary_is_rejected() {
    let p = FheParams::desk();
    let (mut c, mut s, mut r) = setup(&p, 9);
    let expected = s.register_circuit(&Circuit::affine(2, 0)).unwrap();
    let swapped = s.register_circuit(&Circuit::inner_product(&[2])).unwrap();
    assert_ne!(expected, swapped);
    let x = c.encrypt_value(21, &mut r).unwrap();
    let (y, pi) = s.eval(&swapped, &x, [1; 32]).unwrap();
    assert_eq!(raw_decrypt(&c, &y), 42);
    assert_eq!(c.verify(&y, &x, &pi, [1; 32], expected).unwrap_err(), Rejection::CircuitMismatch);
}

#[test]
fn rejection_reasons_for_quote_and_monitor() {
    let p = FheParams::toy();
    let (mut c, mut s, mut r) = setup(&p, 10);
    let m = s.register_circuit(&Circuit::identity()).unwrap();
    let x = c.encrypt_value(4, &mut r).unwrap();
    let (y, pi) = s.eval(&m, &x, [1; 32]).unwrap();
    // stale nonce
    assert_eq!(c.verify(&y, &x, &pi, [2; 32], m).unwrap_err(), Rejection::BadQuote);
    // corrupted signature
    let mut bad = pi.clone();
    bad.quote.signature.0[0] ^= 1;
    assert_eq!(c.verify(&y, &x, &bad, [1; 32], m).unwrap_err(), Rejection::BadQuote);
    // history that does not fold to the quoted PCR2
    let mut bad = pi.clone();
    bad.pcr2_history.insert(0, Digest([7; 32]));
    assert_eq!(c.verify(&y, &x, &bad, [1; 32], m).unwrap_err(), Rejection::TranscriptMismatch);
    // transcript edited after attestation
    let mut bad = pi.clone();
    let mut entries = bad.transcript.entries().to_vec();
    entries.pop();
    bad.transcript = Transcript::from_entries(entries);
    assert_eq!(c.verify(&y, &x, &bad, [1; 32], m).unwrap_err(), Rejection::TranscriptMismatch);

    // a server whose TPM is genuine but whose monitor is not the reference
    let manufacturer = ManufacturerRoot::generate(&mut r);
    let tpm = Tpm::boot(&manufacturer, &mut r);
    let rogue = Monitor::measured_boot(tpm, b"patched monitor").unwrap();
    let mut rs = ServerContext::new(rogue, p.clone());
    let rm = rs.register_circuit(&Circuit::identity()).unwrap();
    let mut c2 = ClientKeys::new(&p, TrustAnchors { manufacturer_pk: manufacturer.public(), monitor: c.anchors().monitor }, &mut r);
    let x2 = c2.encrypt_value(4, &mut r).unwrap();
    let (y2, pi2) = rs.eval(&rm, &x2, [3; 32]).unwrap();
    assert_eq!(c2.verify(&y2, &x2, &pi2, [3; 32], rm).unwrap_err(), Rejection::MonitorMismatch);

    // an attestation key no trusted manufacturer endorsed
    let (_, mut other) = vfhe_gen(&p, &mut r);
    let om = other.register_circuit(&Circuit::identity()).unwrap();
    let (y3, pi3) = other.eval(&om, &x, [4; 32]).unwrap();
    assert_eq!(c.verify(&y3, &x, &pi3, [4; 32], m).unwrap_err(), Rejection::UntrustedEndorsement);
    assert_eq!(c.decryption_count(), 0);
}

#[test]
fn input_mismatch_when_server_evaluates_other_ciphertext() {
    let p = FheParams::toy();
    let (mut c, mut s, mut r) = setup(&p, 11);
    let m = s.register_circuit(&Circuit::identity()).unwrap();
    let x = c.encrypt_value(4, &mut r).unwrap();
    let other = c.encrypt_value(4, &mut r).unwrap();
    let (y, pi) = s.eval(&m, &other, [1; 32]).unwrap();
    assert_eq!(c.verify(&y, &x, &pi, [1; 32], m).unwrap_err(), Rejection::InputMismatch);
}

#[test]
fn batch_uses_one_signature_and_binds_positions() {
    let p = FheParams::desk();
    let (mut c, mut s, mut r) = setup(&p, 12);
    let m = s.register_circuit(&Circuit::affine(3, 1)).unwrap();
    let xs: Vec<u64> = (0..10).map(|i| 100 + i).collect();
    let cts: Vec<Ciphertext> = xs.iter().map(|&x| c.encrypt_value(x, &mut r).unwrap()).collect();
    let sigs = s.monitor().tpm().signature_count();
    let (ys, pi) = s.eval_batch(&m, &cts, [5; 32]).unwrap();
    assert_eq!(s.monitor().tpm().signature_count(), sigs + 1);
    assert_eq!(pi.transcript.len(), crate::monitor::CREATE_ENTRY_COUNT + 20);
    let v = c.verify_batch(&ys, &cts, &pi, [5; 32], m).unwrap();
    assert_eq!(c.decrypt_values(&v).unwrap(), xs.iter().map(|x| (3 * x + 1) % 65537).collect::<Vec<_>>());
    let mut swapped = ys.clone();
    swapped.swap(2, 7);
    assert_eq!(c.verify_batch(&swapped, &cts, &pi, [5; 32], m).unwrap_err(), Rejection::OutputMismatch);
}

#[test]
fn eval_prime_rejects_malformed_server_input() {
    let p = FheParams::desk();
    let (c, mut s, mut r) = setup(&p, 13);
    let m = s.register_circuit(&Circuit::server_inner_product(2)).unwrap();
    let (w, _) = ServerWeights::commit(vec![5, p.t()], false, &mut r);
    let x = c.encrypt_value(1, &mut r).unwrap();
    let err = s.eval_with_server_input(&m, &w, &x, [0; 32]).unwrap_err();
    assert!(matches!(err, VfheError::EvalAborted(EnclaveAbort { reason: AbortReason::WellFormednessViolation, .. })));
    // the aborted enclave was never given the client ciphertext
    let eid = EnclaveId(0);
    let t = s.monitor().transcript(eid).unwrap();
    assert_eq!(t.payloads(EntryTag::Input).count(), 0);
    assert!(s.run(eid, &encode_ciphertexts(&[x])).is_err());
}

#[test]
fn eval_prime_commits_and_verifies() {
    let p = FheParams::desk();
    let (mut c, mut s, mut r) = setup(&p, 14);
    let circuit = Circuit::new(vec![Op::MacServer(0), Op::MacServer(1)]);
    let m = s.register_circuit(&circuit).unwrap();
    let values = vec![3, 10];
    let mut roots = vec![];
    for _ in 0..2 {
        let (w, root) = ServerWeights::commit(values.clone(), true, &mut r);
        let mut session = ClientSession::new(&mut r);
        let x = vec![c.encrypt_value(2, &mut r).unwrap(), c.encrypt_value(5, &mut r).unwrap()];
        let eid = s.open(&m).unwrap();
        s.load_server_input(eid, &w.to_bytes()).unwrap();
        let msg = encode_ciphertexts(&x);
        session.record_sent(&msg);
        let out = s.run(eid, &msg).unwrap();
        session.record_received(&out);
        let pi = s.attest(eid, session.nonce()).unwrap();
        assert_eq!(pi.transcript.payloads(EntryTag::ServerInputCommitment).collect::<Vec<_>>(), vec![&root]);
        let y = Ciphertext::from_bytes(&p, &out).unwrap();
        let expect = Expectation { circuit: m, commitment: Some(root) };
        let v = c.verify_session(&expect, &session, &pi, vec![y.clone()]).unwrap();
        assert_eq!(c.decrypt_values(&v).unwrap(), vec![3 * 2 + 10 * 5]);
        let missing = Expectation { circuit: m, commitment: None };
        assert_eq!(c.verify_session(&missing, &session, &pi, vec![y]).unwrap_err(), Rejection::CommitmentMismatch);
        roots.push(root);
    }
    assert_ne!(roots[0], roots[1]);
}

#[test]
fn recommitted_modified_input_is_rejected() {
    let p = FheParams::desk();
    let (mut c, mut s, mut r) = setup(&p, 15);
    let m = s.register_circuit(&Circuit::server_inner_product(1)).unwrap();
    let (honest, reference) = ServerWeights::commit(vec![9], false, &mut r);
    let (modified, _) = ServerWeights::commit(vec![10], false, &mut r);
    let x = c.encrypt_value(1, &mut r).unwrap();
    let (y, pi) = s.eval_with_server_input(&m, &honest, &x, [1; 32]).unwrap();
    assert!(c.verify_with_commitment(&y, &x, &pi, [1; 32], m, Some(reference)).is_ok());
    let (y, pi) = s.eval_with_server_input(&m, &modified, &x, [2; 32]).unwrap();
    assert_eq!(
        c.verify_with_commitment(&y, &x, &pi, [2; 32], m, Some(reference)).unwrap_err(),
        Rejection::CommitmentMismatch
    );
    // a transcript without any commitment
    let plain = s.register_circuit(&Circuit::identity()).unwrap();
    let (y, pi) = s.eval(&plain, &x, [3; 32]).unwrap();
    assert_eq!(
        c.verify_with_commitment(&y, &x, &pi, [3; 32], plain, Some(reference)).unwrap_err(),
        Rejection::CommitmentMismatch
    );
}

fn random_circuit(r: &mut ChaCha20Rng, t: u64) -> (Circuit, usize) {
    match r.gen_range(0..3) {
        0 => (Circuit::identity(), 1),
        1 => (Circuit::affine(r.gen_range(0..t), r.gen_range(0..t)), 1),
        _ => {
            let k = r.gen_range(1..5);
            let w: Vec<u64> = (0..k).map(|_| r.gen_range(0..t)).collect();
            (Circuit::inner_product(&w), k)
        }
    }
}

#[test]
fn completeness_over_random_honest_runs() {
    let p = FheParams::desk();
    let t = p.t();
    let (mut c, mut s, mut r) = setup(&p, 16);
    for run in 0..1000 {
        let (circuit, k) = random_circuit(&mut r, t);
        let m = s.register_circuit(&circuit).unwrap();
        let xs: Vec<u64> = (0..k).map(|_| r.gen_range(0..t)).collect();
        let cts: Vec<Ciphertext> = xs.iter().map(|&x| c.encrypt_value(x, &mut r).unwrap()).collect();
        let mut session = ClientSession::new(&mut r);
        let eid = s.open(&m).unwrap();
        let msg = encode_ciphertexts(&cts);
        session.record_sent(&msg);
        let out = s.run(eid, &msg).unwrap();
        session.record_received(&out);
        let pi = s.attest(eid, session.nonce()).unwrap();
        let y = Ciphertext::from_bytes(&p, &out).unwrap();
        let v = c
            .verify_session(&Expectation { circuit: m, commitment: None }, &session, &pi, vec![y])
            .unwrap_or_else(|e| panic!("run {run}: {e}"));
        assert_eq!(c.decrypt_values(&v).unwrap()[0], circuit.eval_plain(t, &xs, None).unwrap(), "run {run}");
    }
    assert_eq!(s.monitor().tpm().signature_count(), 1000);
}

#[test]
fn exhaustive_correctness_small_domain() {
    // t = 61: a single-coefficient domain of size 61
    let p = FheParams::new(16, crate::fhe::Q55, 61, 3.2).unwrap();
    let (mut c, mut s, mut r) = setup(&p, 17);
    let circuit = Circuit::affine(17, 5);
    let m = s.register_circuit(&circuit).unwrap();
    for x in 0..61 {
        let cx = c.encrypt_value(x, &mut r).unwrap();
        let nonce = r.gen();
        let (y, pi) = s.eval(&m, &cx, nonce).unwrap();
        let v = c.verify(&y, &cx, &pi, nonce, m).unwrap();
        assert_eq!(c.decrypt_values(&v).unwrap()[0], (17 * x + 5) % 61);
    }
}

#[test]
fn circuit_validation() {
    let p = FheParams::toy();
    assert!(Circuit::affine(17, 0).validate(&p).is_err());
    assert!(Circuit::affine(16, 16).validate(&p).is_ok());
    assert!(Circuit::from_bytes(&[0, 1, 0x09, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
    assert!(Circuit::from_bytes(&[0, 2, 0x01]).is_err());
}

#[test]
fn server_weights_encoding() {
    let mut r = rng(18);
    for hiding in [false, true] {
        let (w, root) = ServerWeights::commit(vec![1, 2, 3], hiding, &mut r);
        let back = ServerWeights::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.root().unwrap(), root);
    }
    assert!(ServerWeights::from_bytes(&[0, 0, 0, 1, 0]).is_err());
}

fn arb_op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Nop),
        any::<u32>().prop_map(Op::Load),
        any::<u64>().prop_map(Op::AddConst),
        any::<u64>().prop_map(Op::MulConst),
        (any::<u32>(), any::<u32>()).prop_map(|(i, w)| Op::Mac { input: i, weight: w as u64 }),
        any::<u32>().prop_map(Op::MacServer),
        any::<u32>().prop_map(Op::AddInput),
    ]
}

proptest! {
    #[test]
    fn circuit_encoding_roundtrip(ops in proptest::collection::vec(arb_op(), 0..40)) {
        let c = Circuit::new(ops);
        prop_assert_eq!(Circuit::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn signatures_equal_attest_calls(rounds in 1usize..6, per in 1usize..4) {
        let p = FheParams::toy();
        let (c, mut s, mut r) = setup(&p, 19);
        let m = s.register_circuit(&Circuit::identity()).unwrap();
        for _ in 0..rounds {
            let xs: Vec<Ciphertext> = (0..per).map(|i| c.encrypt_value(i as u64, &mut r).unwrap()).collect();
            s.eval_batch(&m, &xs, r.gen()).unwrap();
        }
        prop_assert_eq!(s.monitor().tpm().signature_count(), rounds as u64);
    }
}
