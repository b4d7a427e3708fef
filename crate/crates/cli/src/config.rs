//! Settings resolved from built-in defaults, an optional `key=value` file
//! and command-line flags, in increasing precedence.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use attested_fhe::fhe::FheParams;
use attested_fhe::harness::TransportKind;
use attested_fhe::tpm::{LatencyModel, DTPM_SIGN_LATENCY_US};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const DEFAULT_PORT: u16 = 7411;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// n = 1024, t = 65537.
    Desk,
    /// n = 4096, t = 65537.
    Wide,
    /// n = 16, t = 17.
    Toy,
}

impl Preset {
    pub fn params(self) -> FheParams {
        match self {
            Preset::Desk => FheParams::desk(),
            Preset::Wide => FheParams::wide(),
            Preset::Toy => FheParams::toy(),
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Preset as clap::ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TransportChoice {
    Channel,
    Tcp,
}

impl FromStr for TransportChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <TransportChoice as clap::ValueEnum>::from_str(s, true)
    }
}

/// A malformed configuration. Reported with the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Values a config file may set. Unset fields fall through to defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileConfig {
    pub preset: Option<Preset>,
    pub latency_us: Option<u64>,
    pub transport: Option<TransportChoice>,
    pub port: Option<u16>,
    pub seed: Option<u64>,
}

impl FileConfig {
    /// Blank lines and `#` comments are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let mut c = FileConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| UsageError(format!("config line {}: {msg}", n + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "preset" => c.preset = Some(v.parse().map_err(bad)?),
                "latency_us" => c.latency_us = Some(v.parse().map_err(|e| bad(format!("latency_us: {e}")))?),
                "transport" => c.transport = Some(v.parse().map_err(bad)?),
                "port" => c.port = Some(v.parse().map_err(|e| bad(format!("port: {e}")))?),
                "seed" => c.seed = Some(v.parse().map_err(|e| bad(format!("seed: {e}")))?),
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub preset: Preset,
    pub params: FheParams,
    pub latency: LatencyModel,
    pub transport: TransportChoice,
    pub port: u16,
    pub seed: Option<u64>,
}

impl Settings {
    pub fn resolve(
        file: FileConfig,
        preset: Option<Preset>,
        latency_us: Option<u64>,
        transport: Option<TransportChoice>,
        port: Option<u16>,
        seed: Option<u64>,
    ) -> Result<Self, UsageError> {
        let preset = preset.or(file.preset).unwrap_or(Preset::Desk);
        let quote_us = latency_us.or(file.latency_us).unwrap_or(DTPM_SIGN_LATENCY_US);
        Ok(Settings {
            preset,
            params: preset.params(),
            latency: LatencyModel { quote_us },
            transport: transport.or(file.transport).unwrap_or(TransportChoice::Channel),
            port: port.or(file.port).unwrap_or(DEFAULT_PORT),
            seed: seed.or(file.seed),
        })
    }

    /// The in-process transport for harness-driven commands.
    pub fn transport_kind(&self) -> TransportKind {
        match self.transport {
            TransportChoice::Channel => TransportKind::Channel,
            TransportChoice::Tcp => TransportKind::Tcp(0),
        }
    }

    /// Deterministic when a seed is set; each `stream` is independent.
    pub fn rng(&self, stream: u64) -> ChaCha20Rng {
        match self.seed {
            Some(s) => {
                let mut r = ChaCha20Rng::seed_from_u64(s);
                r.set_stream(stream);
                r
            }
            None => ChaCha20Rng::from_entropy(),
        }
    }

    /// The seed itself, or a fresh one.
    pub fn seed_or_random(&self) -> u64 {
        self.seed.unwrap_or_else(rand::random)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_apply_below_flags() {
        let f = FileConfig::parse("# demo\npreset = toy\nlatency_us=1000\ntransport=tcp\nport=9000\nseed=7\n").unwrap();
        let s = Settings::resolve(f.clone(), None, None, None, None, None).unwrap();
        assert_eq!(s.preset, Preset::Toy);
        assert_eq!(s.latency.quote_us, 1000);
        assert_eq!(s.transport, TransportChoice::Tcp);
        assert_eq!((s.port, s.seed), (9000, Some(7)));
        let s = Settings::resolve(f, Some(Preset::Wide), Some(5), Some(TransportChoice::Channel), Some(1), Some(2)).unwrap();
        assert_eq!(s.preset, Preset::Wide);
        assert_eq!(s.latency.quote_us, 5);
        assert_eq!((s.port, s.seed), (1, Some(2)));
    }

    #[test]
    fn defaults() {
        let s = Settings::resolve(FileConfig::default(), None, None, None, None, None).unwrap();
        assert_eq!(s.preset, Preset::Desk);
        assert_eq!(s.latency.quote_us, 195_752);
        assert_eq!(s.port, DEFAULT_PORT);
        assert_eq!(s.seed, None);
    }

    #[test]
    fn bad_lines_are_usage_errors() {
        for text in ["preset", "preset=huge", "colour=blue", "port=70000", "seed=-1"] {
            assert!(FileConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn seeded_streams_are_reproducible_and_distinct() {
        use rand::RngCore;
        let s = Settings::resolve(FileConfig::default(), None, None, None, None, Some(3)).unwrap();
        assert_eq!(s.rng(1).next_u64(), s.rng(1).next_u64());
        assert_ne!(s.rng(1).next_u64(), s.rng(2).next_u64());
    }
}
