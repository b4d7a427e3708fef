use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

const BEHAVIORS: [(&str, &str); 10] = [
    ("TamperOutputCiphertext", "OutputMismatch"),
    ("ReencryptCorrectOutput", "OutputMismatch"),
    ("SwapCircuit", "CircuitMismatch"),
    ("MalformedDbEntry", "Refused(WellFormednessViolation)"),
    ("WrongCommitment", "CommitmentMismatch"),
    ("RecommitModifiedSet", "CommitmentMismatch"),
    ("ReplayTranscript", "BadQuote"),
    ("ForgeSignature", "UntrustedEndorsement"),
    ("DropInput", "InputMismatch"),
    ("ReorderInputs", "InputMismatch"),
];

fn afhe() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_afhe"));
    c.env_remove("AFHE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    afhe().args(args).output().expect("spawn afhe")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fields(o: &Output) -> BTreeMap<String, Vec<String>> {
    let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for line in stdout(o).lines() {
        if let Some((k, v)) = line.split_once('=') {
            m.entry(k.to_string()).or_default().push(v.to_string());
        }
    }
    m
}

fn field(o: &Output, key: &str) -> String {
    fields(o).get(key).and_then(|v| v.first().cloned()).unwrap_or_default()
}

#[test]
fn wrong_commitment_attack_exits_nonzero_with_reason() {
    let o = run(&["attack", "WrongCommitment", "--app", "pir", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(field(&o, "verdict"), "CommitmentMismatch");
    assert_eq!(field(&o, "decrypted"), "0");
}

#[test]
fn every_behavior_is_rejected_through_the_cli() {
    for app in ["vfhe", "pir", "psi"] {
        for (behavior, reason) in BEHAVIORS {
            let o = run(&["attack", behavior, "--app", app, "--seed", "2"]);
            assert_eq!(o.status.code(), Some(3), "{app}/{behavior}");
            assert_eq!(field(&o, "verdict"), reason, "{app}/{behavior}");
            assert_eq!(field(&o, "expected"), reason);
            assert_eq!(field(&o, "decrypted"), "0");
            assert_eq!(field(&o, "decryption_failures"), "0");
        }
    }
}

#[test]
fn honest_record_verifies_and_a_tampered_one_does_not() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("pi.txt");
    let o = run(&["attack", "none", "--app", "pir", "--seed", "3", "--record", rec.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&o, "verdict"), "Accepted");

    let v = run(&["verify-transcript", rec.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(0));
    assert_eq!(field(&v, "verdict"), "Accepted");
    assert_eq!(field(&v, "transcript_digest").len(), 64);

    let text = fs::read_to_string(&rec).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let i = lines.iter().position(|l| l.starts_with("received=")).unwrap();
    let last = lines[i].pop().unwrap();
    lines[i].push(if last == '0' { '1' } else { '0' });
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, lines.join("\n")).unwrap();
    let v = run(&["verify-transcript", bad.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(3));
    assert_eq!(field(&v, "verdict"), "OutputMismatch");

    let garbage = dir.path().join("garbage.txt");
    fs::write(&garbage, "proof=zz\n").unwrap();
    assert_eq!(run(&["verify-transcript", garbage.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn bench_csv_charges_one_signature_per_batch() {
    let o = run(&["bench", "--batches", "1,2,5,10,50", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(
        lines.next().unwrap(),
        "app,k,setup_ms,preprocess_ms,query_ms,attest_ms,attest_per_query_ms,signatures,tpm_virtual_ms,bytes_on_wire"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    for (row, k) in rows.iter().zip([1.0, 2.0, 5.0, 10.0, 50.0]) {
        assert_eq!(row[5], "195.752");
        let per: f64 = row[6].parse().unwrap();
        assert!((per - 195.752 / k).abs() <= 195.752 / k * 0.01);
        assert_eq!(row[7], "1");
    }
    assert_eq!(rows[3][6], "19.575");
}

#[test]
fn usage_errors_have_their_own_exit_code() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["attack", "Bogus", "--app", "pir"]).status.code(), Some(2));
    assert_eq!(run(&["attack", "none", "--app", "smtp"]).status.code(), Some(2));
    assert_eq!(run(&["bench", "--batches", "0"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("afhe.conf");
    fs::write(&cfg, "preset=enormous\n").unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "bench", "--batches", "1"]).status.code(), Some(2));
}

#[test]
fn config_file_and_seed_env_are_honored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("afhe.conf");
    fs::write(&cfg, "# bench at a faster TPM\nlatency_us=1000\nseed=9\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "bench", "--batches", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains(",1.000,1.000,1,"));

    let a = run(&["attack", "none", "--app", "vfhe", "--seed", "11"]);
    let b = afhe().args(["attack", "none", "--app", "vfhe"]).env("AFHE_SEED", "11").output().unwrap();
    assert_eq!(fields(&a).get("value"), fields(&b).get("value"));
    assert!(fields(&a).contains_key("value"));
}

/// Starts a server and returns it with its `key=value` banner.
fn spawn_server(args: &[&str], last_key: &str) -> (Child, BTreeMap<String, String>) {
    let mut child = afhe()
        .args(args)
        .args(["--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut banner = BTreeMap::new();
    let mut reader = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    while !banner.contains_key(last_key) {
        line.clear();
        assert!(reader.read_line(&mut line).unwrap() > 0, "server exited early");
        if let Some((k, v)) = line.trim().split_once('=') {
            banner.insert(k.to_string(), v.to_string());
        }
    }
    (child, banner)
}

fn keygen(dir: &Path) {
    let o = run(&["keygen", "--out", dir.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manufacturer.key", "anchors.txt", "client.key"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn pir_serve_and_query_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    keygen(dir.path());
    let (n, size) = (64usize, 32usize);
    let db: Vec<u8> = (0..n * size).map(|i| (i * 7 % 251) as u8).collect();
    let db_path = dir.path().join("db.bin");
    fs::write(&db_path, &db).unwrap();
    let d = |f: &str| dir.path().join(f).to_str().unwrap().to_string();

    let n_s = n.to_string();
    let size_s = size.to_string();
    let (mut server, banner) = spawn_server(
        &[
            "pir", "serve", "--db", &d("db.bin"), "--n", &n_s, "--entry-size", &size_s,
            "--manufacturer", &d("manufacturer.key"), "--sessions", "2",
        ],
        "entry_size",
    );
    let addr = banner["listening"].clone();
    let root = banner["root"].clone();

    let query = |root: &str| {
        run(&[
            "pir", "query", "--index", "3,17", "--root", root, "--n", &n_s, "--entry-size", &size_s,
            "--anchors", &d("anchors.txt"), "--key", &d("client.key"), "--addr", &addr,
            "--record", &d("pir.rec"),
        ])
    };
    let o = query(&root);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let entries = fields(&o)["entry"].clone();
    assert_eq!(entries, vec![hex::encode(&db[3 * size..4 * size]), hex::encode(&db[17 * size..18 * size])]);
    assert_eq!(run(&["verify-transcript", &d("pir.rec")]).status.code(), Some(0));

    let wrong = "00".repeat(32);
    let o = query(&wrong);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(field(&o, "verdict"), "CommitmentMismatch");
    assert!(!fields(&o).contains_key("entry"));
    assert!(server.wait().unwrap().success());
}

#[test]
fn psi_serve_and_intersect_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    keygen(dir.path());
    let d = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    let server_items: Vec<String> = (0..100).map(|i| hex::encode(format!("user-{i}@example.org"))).collect();
    let client_items: Vec<String> = ["user-7@example.org", "nobody@example.org", "user-42@example.org"]
        .iter()
        .map(hex::encode)
        .collect();
    fs::write(d("set.txt"), server_items.join("\n") + "\n").unwrap();
    fs::write(d("items.txt"), client_items.join("\n")).unwrap();

    let (mut server, banner) = spawn_server(
        &["psi", "serve", "--set", &d("set.txt"), "--manufacturer", &d("manufacturer.key"), "--seed", "6"],
        "degree",
    );
    assert_eq!(banner["bins"], "256");
    let o = run(&[
        "psi", "intersect", "--items", &d("items.txt"), "--root", &banner["root"], "--bins", &banner["bins"],
        "--anchors", &d("anchors.txt"), "--addr", &banner["listening"], "--chunks", "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut found = fields(&o)["match"].clone();
    found.sort();
    let mut want = vec![client_items[0].clone(), client_items[2].clone()];
    want.sort();
    assert_eq!(found, want);
    assert!(server.wait().unwrap().success());
}

#[test]
fn server_with_unendorsed_tpm_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    keygen(dir.path());
    let d = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    fs::write(d("db.bin"), vec![1u8; 16 * 8]).unwrap();
    // No --manufacturer: the server's TPM is endorsed by a root the client does not trust.
    let (mut server, banner) = spawn_server(&["pir", "serve", "--db", &d("db.bin"), "--n", "16", "--entry-size", "8"], "entry_size");
    let o = run(&[
        "pir", "query", "--index", "0", "--root", &banner["root"], "--n", "16", "--entry-size", "8",
        "--anchors", &d("anchors.txt"), "--addr", &banner["listening"],
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(field(&o, "verdict"), "UntrustedEndorsement");
    assert!(server.wait().unwrap().success());
}

#[test]
fn mismatched_database_size_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("db.bin");
    fs::write(&db, vec![0u8; 32 * 8]).unwrap();
    let o = run(&["pir", "serve", "--db", db.to_str().unwrap(), "--n", "16", "--entry-size", "8", "--port", "0"]);
    assert_eq!(o.status.code(), Some(2));
}
