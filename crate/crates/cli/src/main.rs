//! `afhe`: key generation, PIR and PSI servers and clients, attack demos and
//! the batching bench.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error, 3 the client
//! rejected the server's proof or the server refused to serve.

mod config;

use std::fs;
use std::io::Write;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{CryptoRng, RngCore};

use attested_fhe::crypto::Digest;
use attested_fhe::fhe::{FheKeyPair, FheParams};
use attested_fhe::harness::{
    anchors_from_text, anchors_to_text, bench_csv, boot_server, loopback_listener, pir_session, psi_session, run_bench,
    run_session, serve, Adversary, App, AttackBehavior, ClientOutcome, Output, Scenario, SessionRecord, TcpTransport,
};
use attested_fhe::monitor::{MonitorReference, DEFAULT_BOOT_CONFIG};
use attested_fhe::pir::{PirClient, PirDatabase, PirLayout, PirServer};
use attested_fhe::psi::{PsiClient, PsiLayout, PsiServer, PsiServerSet};
use attested_fhe::tpm::ManufacturerRoot;
use attested_fhe::vfhe::{ClientKeys, ServerContext, TrustAnchors, REFERENCE_MONITOR};

use config::{FileConfig, Preset, Settings, TransportChoice, UsageError};

const EXIT_ERROR: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_REJECTED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "afhe", version, about = "Attested homomorphic encryption: PIR, PSI and verifiable evaluation")]
struct Cli {
    /// `key=value` file with any of: preset, latency_us, transport, port, seed.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for all randomness. Unset means fresh entropy.
    #[arg(long, global = true, env = "AFHE_SEED")]
    seed: Option<u64>,
    /// FHE parameter preset.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Virtual TPM signing latency, in microseconds.
    #[arg(long, global = true, value_name = "US")]
    latency_us: Option<u64>,
    /// Transport for in-process sessions (attack, bench).
    #[arg(long, global = true, value_enum)]
    transport: Option<TransportChoice>,
    /// Loopback TCP port for serve and client commands; 0 picks a free one.
    #[arg(long, global = true)]
    port: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a manufacturer root, the matching trust anchors and a client key.
    Keygen {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Authenticated private information retrieval.
    #[command(subcommand)]
    Pir(PirCommand),
    /// Authenticated private set intersection.
    #[command(subcommand)]
    Psi(PsiCommand),
    /// Run one in-process session against a server with the given behavior.
    Attack {
        /// An attack behavior name, or `none` for an honest server.
        behavior: String,
        #[arg(long, value_parser = parse_app)]
        app: App,
        /// Messages in the final round.
        #[arg(long)]
        batch: Option<usize>,
        /// Write the client's session record here.
        #[arg(long, value_name = "FILE")]
        record: Option<PathBuf>,
    },
    /// Honest sessions for each batch size; CSV on stdout.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,50")]
        batches: Vec<usize>,
        #[arg(long, value_parser = parse_app, default_value = "vfhe")]
        app: App,
        /// Write the CSV here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Re-verify a saved session record offline.
    VerifyTranscript { file: PathBuf },
}

#[derive(Args, Debug)]
struct ServeOpts {
    /// Manufacturer key from `keygen`; generated when absent.
    #[arg(long, value_name = "FILE")]
    manufacturer: Option<PathBuf>,
    /// Write the trust anchors for clients here.
    #[arg(long, value_name = "FILE")]
    anchors_out: Option<PathBuf>,
    /// Sessions to serve before exiting.
    #[arg(long, default_value_t = 1)]
    sessions: usize,
}

#[derive(Args, Debug)]
struct ClientOpts {
    /// Trust anchors written by `keygen` or a server.
    #[arg(long, value_name = "FILE")]
    anchors: PathBuf,
    /// Client key from `keygen`; a fresh key is generated when absent.
    #[arg(long, value_name = "FILE")]
    key: Option<PathBuf>,
    /// Server address; defaults to the loopback port.
    #[arg(long)]
    addr: Option<SocketAddr>,
    /// Write the session record here.
    #[arg(long, value_name = "FILE")]
    record: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum PirCommand {
    /// Serve a database of concatenated fixed-size entries.
    Serve {
        #[arg(long, value_name = "FILE")]
        db: PathBuf,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        entry_size: usize,
        #[command(flatten)]
        opts: ServeOpts,
    },
    /// Retrieve entries and check them against a reference root.
    Query {
        #[arg(long, value_delimiter = ',', required = true)]
        index: Vec<usize>,
        #[arg(long, value_parser = parse_digest)]
        root: Digest,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        entry_size: usize,
        #[command(flatten)]
        opts: ClientOpts,
    },
}

#[derive(Subcommand, Debug)]
enum PsiCommand {
    /// Serve a set file: one hex-encoded item per line.
    Serve {
        #[arg(long, value_name = "FILE")]
        set: PathBuf,
        /// Defaults to twice the set size, rounded to a power of two.
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long, default_value_t = 8)]
        degree: usize,
        #[command(flatten)]
        opts: ServeOpts,
    },
    /// Intersect a local item file with the server's committed set.
    Intersect {
        #[arg(long, value_name = "FILE")]
        items: PathBuf,
        #[arg(long, value_parser = parse_digest)]
        root: Digest,
        /// The server's bin count, as printed by `psi serve`.
        #[arg(long)]
        bins: usize,
        #[arg(long, default_value_t = 8)]
        degree: usize,
        /// Query messages the masked items are split across.
        #[arg(long, default_value_t = 1)]
        chunks: usize,
        #[command(flatten)]
        opts: ClientOpts,
    },
}

fn parse_app(s: &str) -> Result<App, String> {
    s.parse()
}

fn parse_digest(s: &str) -> Result<Digest, String> {
    Digest::from_hex(s).map_err(|e| e.to_string())
}

enum Status {
    Ok,
    Rejected,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Rejected) => ExitCode::from(EXIT_REJECTED),
        Err(e) => {
            eprintln!("afhe: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_ERROR)
            }
        }
    }
}

fn run(cli: Cli) -> Result<Status> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let s = Settings::resolve(file, cli.preset, cli.latency_us, cli.transport, cli.port, cli.seed)?;
    match cli.command {
        Command::Keygen { out } => keygen(&s, &out),
        Command::Pir(PirCommand::Serve { db, n, entry_size, opts }) => pir_serve(&s, &db, n, entry_size, &opts),
        Command::Pir(PirCommand::Query {
            index,
            root,
            n,
            entry_size,
            opts,
        }) => pir_query(&s, &index, root, n, entry_size, &opts),
        Command::Psi(PsiCommand::Serve { set, bins, degree, opts }) => psi_serve(&s, &set, bins, degree, &opts),
        Command::Psi(PsiCommand::Intersect {
            items,
            root,
            bins,
            degree,
            chunks,
            opts,
        }) => psi_intersect(&s, &items, root, bins, degree, chunks, &opts),
        Command::Attack {
            behavior,
            app,
            batch,
            record,
        } => attack(&s, &behavior, app, batch, record.as_deref()),
        Command::Bench { batches, app, out } => bench(&s, app, &batches, out.as_deref()),
        Command::VerifyTranscript { file } => verify_transcript(&file),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn reference_anchors(manufacturer: &ManufacturerRoot) -> TrustAnchors {
    TrustAnchors {
        manufacturer_pk: manufacturer.public(),
        monitor: MonitorReference::for_binary(REFERENCE_MONITOR, DEFAULT_BOOT_CONFIG),
    }
}

fn keygen(s: &Settings, out: &Path) -> Result<Status> {
    let mut rng = s.rng(1);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manufacturer = ManufacturerRoot::generate(&mut rng);
    let anchors = reference_anchors(&manufacturer);
    let keys = ClientKeys::new(&s.params, anchors, &mut rng);
    write_file(&out.join("manufacturer.key"), hex::encode(manufacturer.secret_bytes()) + "\n")?;
    write_file(&out.join("anchors.txt"), anchors_to_text(&anchors))?;
    write_file(&out.join("client.key"), keys.key_bytes())?;
    println!("manufacturer_pk={}", hex::encode(anchors.manufacturer_pk.0));
    println!("params={:?} n={} t={}", s.preset, s.params.n(), s.params.t());
    println!("wrote {}", out.display());
    Ok(Status::Ok)
}

fn load_manufacturer<R: RngCore + CryptoRng>(path: Option<&Path>, rng: &mut R) -> Result<ManufacturerRoot> {
    let Some(path) = path else {
        return Ok(ManufacturerRoot::generate(rng));
    };
    let seed: [u8; 32] = hex::decode(read_text(path)?.trim())
        .context("manufacturer key is not hex")?
        .try_into()
        .map_err(|_| anyhow::anyhow!("manufacturer key must be 32 bytes"))?;
    Ok(ManufacturerRoot::from_secret_bytes(&seed))
}

fn load_client_keys<R: RngCore + CryptoRng>(
    params: &FheParams,
    opts: &ClientOpts,
    rng: &mut R,
) -> Result<(ClientKeys, TrustAnchors)> {
    let anchors = anchors_from_text(&read_text(&opts.anchors)?).map_err(|e| usage(format!("anchors: {e}")))?;
    let keys = match &opts.key {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let pair = FheKeyPair::from_bytes(params, &bytes).context("client key does not match the preset")?;
            ClientKeys::from_keys(pair, anchors)
        }
        None => ClientKeys::new(params, anchors, rng),
    };
    Ok((keys, anchors))
}

/// Accepts `sessions` connections and serves each to completion.
fn serve_loop(s: &Settings, adv: &mut Adversary, sessions: usize, banner: &[String]) -> Result<()> {
    let listener = loopback_listener(s.port).context("binding loopback port")?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "listening={}", listener.local_addr()?)?;
    for line in banner {
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    drop(out);
    for _ in 0..sessions {
        let (stream, peer) = listener.accept()?;
        let mut t = TcpTransport::new(stream);
        match serve(&mut t, adv) {
            Ok(()) => eprintln!("served {peer}"),
            Err(e) => eprintln!("session with {peer} failed: {e}"),
        }
    }
    Ok(())
}

fn boot<R: RngCore + CryptoRng>(
    s: &Settings,
    opts: &ServeOpts,
    rng: &mut R,
) -> Result<ServerContext> {
    let manufacturer = load_manufacturer(opts.manufacturer.as_deref(), rng)?;
    let ctx = boot_server(&manufacturer, s.params.clone(), s.latency, rng)?;
    if let Some(p) = &opts.anchors_out {
        write_file(p, anchors_to_text(&ctx.anchors(manufacturer.public())))?;
    }
    Ok(ctx)
}

fn pir_serve(s: &Settings, db: &Path, n: usize, entry_size: usize, opts: &ServeOpts) -> Result<Status> {
    let mut rng = s.rng(2);
    let bytes = fs::read(db).with_context(|| format!("reading {}", db.display()))?;
    let database = PirDatabase::from_file_bytes(&s.params, entry_size, &bytes)?;
    if database.layout().n_entries != n {
        return Err(usage(format!("{} holds {} entries, not {n}", db.display(), database.layout().n_entries)));
    }
    let root = database.root();
    let ctx = boot(s, opts, &mut rng)?;
    let mut adv = Adversary::honest(Box::new(PirServer::new(ctx, database)));
    serve_loop(
        s,
        &mut adv,
        opts.sessions,
        &[format!("root={}", root.to_hex()), format!("n={n}"), format!("entry_size={entry_size}")],
    )?;
    Ok(Status::Ok)
}

fn connect(s: &Settings, opts: &ClientOpts) -> Result<TcpTransport> {
    let addr = opts.addr.unwrap_or_else(|| SocketAddr::from((Ipv4Addr::LOCALHOST, s.port)));
    TcpTransport::connect(addr).with_context(|| format!("connecting to {addr}"))
}

/// Prints the verdict and, on acceptance, the output lines.
fn report(outcome: &ClientOutcome, anchors: &TrustAnchors, record: Option<&Path>) -> Result<Status> {
    if let (Some(path), Some(rec)) = (record, outcome.record(anchors)) {
        write_file(path, rec.to_text())?;
    }
    println!("verdict={}", outcome.verdict);
    if !outcome.accepted() {
        return Ok(Status::Rejected);
    }
    print_output(&outcome.output);
    Ok(Status::Ok)
}

fn print_output(output: &Output) {
    match output {
        Output::None => {}
        Output::Values(vs) => vs.iter().for_each(|v| println!("value={v}")),
        Output::Entries(es) => es.iter().for_each(|e| println!("entry={}", hex::encode(e))),
        Output::Intersection(xs) => xs.iter().for_each(|x| println!("match={}", hex::encode(x))),
    }
}

fn pir_query(s: &Settings, index: &[usize], root: Digest, n: usize, entry_size: usize, opts: &ClientOpts) -> Result<Status> {
    let mut rng = s.rng(3);
    let layout = PirLayout::new(n, entry_size).map_err(|e| usage(e.to_string()))?;
    if let Some(&bad) = index.iter().find(|&&i| i >= n) {
        return Err(usage(format!("index {bad} is out of range for {n} entries")));
    }
    let (keys, anchors) = load_client_keys(&s.params, opts, &mut rng)?;
    let mut client = PirClient::new(keys, layout, root);
    let mut t = connect(s, opts)?;
    let outcome = pir_session(&mut t, &mut client, index, &mut rng)?;
    report(&outcome, &anchors, opts.record.as_deref())
}

/// One hex-encoded item per line; blank lines are skipped.
fn read_set(path: &Path) -> Result<Vec<Vec<u8>>> {
    read_text(path)?
        .lines()
        .map(str::trim)
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| hex::decode(l).map_err(|e| usage(format!("{} line {}: {e}", path.display(), n + 1))))
        .collect()
}

fn psi_serve(s: &Settings, set: &Path, bins: Option<usize>, degree: usize, opts: &ServeOpts) -> Result<Status> {
    let mut rng = s.rng(4);
    let items = read_set(set)?;
    let layout = PsiLayout::new(bins.unwrap_or_else(|| PsiLayout::for_set_size(items.len()).bins), degree)
        .map_err(|e| usage(e.to_string()))?;
    let ctx = boot(s, opts, &mut rng)?;
    let server_set = PsiServerSet::new(&s.params, layout, &items, &mut rng)?;
    let root = server_set.root()?;
    let mut adv = Adversary::honest(Box::new(PsiServer::new(ctx, server_set)));
    serve_loop(
        s,
        &mut adv,
        opts.sessions,
        &[
            format!("root={}", root.to_hex()),
            format!("bins={}", layout.bins),
            format!("degree={}", layout.degree),
        ],
    )?;
    Ok(Status::Ok)
}

fn psi_intersect(
    s: &Settings,
    items: &Path,
    root: Digest,
    bins: usize,
    degree: usize,
    chunks: usize,
    opts: &ClientOpts,
) -> Result<Status> {
    let mut rng = s.rng(5);
    let layout = PsiLayout::new(bins, degree).map_err(|e| usage(e.to_string()))?;
    if chunks == 0 {
        return Err(usage("--chunks must be positive"));
    }
    let items = read_set(items)?;
    let (keys, anchors) = load_client_keys(&s.params, opts, &mut rng)?;
    let mut client = PsiClient::new(keys, layout, root);
    let mut t = connect(s, opts)?;
    let outcome = psi_session(&mut t, &mut client, &items, chunks, &mut rng)?;
    report(&outcome, &anchors, opts.record.as_deref())
}

fn scenario(s: &Settings, app: App) -> Scenario {
    let mut sc = Scenario::new(app, s.seed_or_random()).with_transport(s.transport_kind());
    sc.params = s.params.clone();
    sc.latency = s.latency;
    sc
}

fn attack(s: &Settings, behavior: &str, app: App, batch: Option<usize>, record: Option<&Path>) -> Result<Status> {
    let attack = if behavior.eq_ignore_ascii_case("none") {
        None
    } else {
        Some(behavior.parse::<AttackBehavior>().map_err(usage)?)
    };
    let mut sc = scenario(s, app);
    if let Some(k) = batch {
        if k == 0 {
            return Err(usage("--batch must be positive"));
        }
        sc = sc.with_batch(k);
    }
    let r = run_session(&sc, attack)?;
    if let (Some(path), Some(rec)) = (record, &r.record) {
        write_file(path, rec.to_text())?;
    }
    println!("app={app}");
    println!("attack={}", attack.map_or("none".to_string(), |a| a.to_string()));
    if let Some(a) = attack {
        println!("expected={}", a.expected());
    }
    println!("verdict={}", r.verdict);
    println!("decrypted={}", r.decrypted);
    println!("decryption_failures={}", r.decryption_failures);
    if !r.accepted {
        return Ok(Status::Rejected);
    }
    if !r.output_correct() {
        bail!("accepted output differs from the plaintext oracle");
    }
    print_output(&r.output);
    Ok(Status::Ok)
}

fn bench(s: &Settings, app: App, batches: &[usize], out: Option<&Path>) -> Result<Status> {
    if batches.is_empty() || batches.contains(&0) {
        return Err(usage("--batches must be a list of positive sizes"));
    }
    let reports = run_bench(&scenario(s, app), batches)?;
    let csv = bench_csv(&reports);
    match out {
        Some(p) => write_file(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(Status::Ok)
}

fn verify_transcript(file: &Path) -> Result<Status> {
    let rec = SessionRecord::from_text(&read_text(file)?).map_err(|e| anyhow::anyhow!("{}: {e}", file.display()))?;
    match rec.verify() {
        Ok(d) => {
            println!("verdict=Accepted");
            println!("transcript_digest={}", d.to_hex());
            Ok(Status::Ok)
        }
        Err(r) => {
            println!("verdict={r:?}");
            Ok(Status::Rejected)
        }
    }
}
