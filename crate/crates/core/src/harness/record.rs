//! Text record of a finished session, re-verifiable offline.
//!
//! One `key=value` per line; digests and byte strings in hex. `sent` and
//! `received` repeat, in order.

use crate::crypto::{Digest, PublicKey};
use crate::monitor::{AttestedTranscript, MonitorReference};
use crate::vfhe::{verify_session, ClientSession, Expectation, Rejection, TrustAnchors};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub anchors: TrustAnchors,
    pub expectation: Expectation,
    pub session: ClientSession,
    pub pi: AttestedTranscript,
}

impl SessionRecord {
    pub fn verify(&self) -> Result<Digest, Rejection> {
        verify_session(&self.anchors, &self.expectation, &self.session, &self.pi)
    }

    pub fn to_text(&self) -> String {
        let mut lines = anchor_lines(&self.anchors);
        lines.extend([
            format!("circuit={}", self.expectation.circuit.to_hex()),
            format!(
                "commitment={}",
                self.expectation.commitment.map(|d| d.to_hex()).unwrap_or_else(|| "none".into())
            ),
            format!("nonce={}", hex::encode(self.session.nonce())),
        ]);
        lines.extend(self.session.sent().iter().map(|d| format!("sent={}", d.to_hex())));
        lines.extend(self.session.received().iter().map(|d| format!("received={}", d.to_hex())));
        lines.push(format!("proof={}", hex::encode(self.pi.to_bytes())));
        lines.join("\n") + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let f = Fields::parse(text)?;
        let nonce: [u8; 32] = f.bytes32("nonce")?;
        let commitment = match f.one("commitment")? {
            "none" => None,
            _ => Some(f.digest("commitment")?),
        };
        let proof = hex::decode(f.one("proof")?).map_err(|e| format!("proof: {e}"))?;
        Ok(SessionRecord {
            anchors: f.anchors()?,
            expectation: Expectation {
                circuit: f.digest("circuit")?,
                commitment,
            },
            session: ClientSession::from_digests(nonce, f.all("sent")?, f.all("received")?),
            pi: AttestedTranscript::from_bytes(&proof).map_err(|e| e.to_string())?,
        })
    }
}

/// Trust anchors in the same `key=value` form, for distribution to clients.
pub fn anchors_to_text(anchors: &TrustAnchors) -> String {
    anchor_lines(anchors).join("\n") + "\n"
}

pub fn anchors_from_text(text: &str) -> Result<TrustAnchors, String> {
    Fields::parse(text)?.anchors()
}

fn anchor_lines(a: &TrustAnchors) -> Vec<String> {
    vec![
        format!("manufacturer_pk={}", hex::encode(a.manufacturer_pk.0)),
        format!("monitor_digest={}", a.monitor.sm_digest.to_hex()),
        format!("boot_config_digest={}", a.monitor.boot_config_digest.to_hex()),
    ]
}

struct Fields<'a>(Vec<(&'a str, &'a str)>);

impl<'a> Fields<'a> {
    /// Blank lines and `#` comments are skipped.
    fn parse(text: &'a str) -> Result<Self, String> {
        let mut fields = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
            fields.push((k.trim(), v.trim()));
        }
        Ok(Fields(fields))
    }

    fn one(&self, key: &str) -> Result<&'a str, String> {
        let mut it = self.0.iter().filter(|(k, _)| *k == key);
        match (it.next(), it.next()) {
            (Some((_, v)), None) => Ok(v),
            (None, _) => Err(format!("missing {key}")),
            _ => Err(format!("duplicate {key}")),
        }
    }

    fn digest(&self, key: &str) -> Result<Digest, String> {
        Digest::from_hex(self.one(key)?).map_err(|e| format!("{key}: {e}"))
    }

    fn bytes32(&self, key: &str) -> Result<[u8; 32], String> {
        hex::decode(self.one(key)?)
            .map_err(|e| format!("{key}: {e}"))?
            .try_into()
            .map_err(|_| format!("{key} must be 32 bytes"))
    }

    fn all(&self, key: &str) -> Result<Vec<Digest>, String> {
        self.0
            .iter()
            .filter(|(k, _)| *k == key)
            .map(|(_, v)| Digest::from_hex(v).map_err(|e| format!("{key}: {e}")))
            .collect()
    }

    fn anchors(&self) -> Result<TrustAnchors, String> {
        Ok(TrustAnchors {
            manufacturer_pk: PublicKey(self.bytes32("manufacturer_pk")?),
            monitor: MonitorReference {
                sm_digest: self.digest("monitor_digest")?,
                boot_config_digest: self.digest("boot_config_digest")?,
            },
        })
    }
}
