//! Public directory of institute verification keys.
//!
//! History is append-only. An entry is active exactly when it is the newest
//! registration for its MIID, so deactivation never rewrites an old record.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blindsig::{BlindSigError, Miid, PublicKey};
use crate::keys::{IntervalNumber, INTERVALS_PER_DAY, KEY_RING_CAPACITY};

/// Default churn window: the 14-day TEK retention horizon.
pub const DEFAULT_CHURN_WINDOW: u32 = INTERVALS_PER_DAY * KEY_RING_CAPACITY as u32;
pub const DEFAULT_CHURN_THRESHOLD: usize = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("malformed public key: {0}")]
    MalformedKey(#[from] BlindSigError),
    #[error("key embeds institute {embedded} but was registered for {claimed}")]
    MiidMismatch { claimed: Miid, embedded: Miid },
    #[error("identical key already registered for {0}")]
    DuplicateKey(Miid),
    #[error("no key registered for {0}")]
    NotFound(Miid),
    #[error("registration at {attempted} precedes the latest entry at {latest}")]
    OutOfOrder { attempted: IntervalNumber, latest: IntervalNumber },
    #[error("registry line {line}: {message}")]
    Import { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub miid: Miid,
    pub public_key: Vec<u8>,
    pub registered_at: IntervalNumber,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Record {
    miid: Miid,
    public_key: Vec<u8>,
    registered_at: IntervalNumber,
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    history: Vec<Record>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChurnReport {
    pub miid: Miid,
    pub window_start: IntervalNumber,
    pub window_end: IntervalNumber,
    pub registrations: usize,
    pub threshold: usize,
    pub flagged: bool,
}

/// One JSON line of the registry export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryLine {
    pub miid: Miid,
    pub key: String,
    pub registered_at: IntervalNumber,
    pub active: bool,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, miid: Miid, public_key: &[u8], now: IntervalNumber) -> Result<RegistryEntry, RegistryError> {
        let parsed = PublicKey::from_bytes(public_key)?;
        if parsed.miid() != miid {
            return Err(RegistryError::MiidMismatch {
                claimed: miid,
                embedded: parsed.miid(),
            });
        }
        let mut previous = self.history.iter().filter(|r| r.miid == miid).peekable();
        if previous.clone().any(|r| r.public_key == public_key) {
            return Err(RegistryError::DuplicateKey(miid));
        }
        if let Some(latest) = previous.next_back() {
            if latest.registered_at > now {
                return Err(RegistryError::OutOfOrder {
                    attempted: now,
                    latest: latest.registered_at,
                });
            }
        }
        self.history.push(Record {
            miid,
            public_key: public_key.to_vec(),
            registered_at: now,
        });
        Ok(self.entry(self.history.len() - 1))
    }

    fn is_active(&self, index: usize) -> bool {
        let miid = self.history[index].miid;
        !self.history[index + 1..].iter().any(|r| r.miid == miid)
    }

    fn entry(&self, index: usize) -> RegistryEntry {
        let r = &self.history[index];
        RegistryEntry {
            miid: r.miid,
            public_key: r.public_key.clone(),
            registered_at: r.registered_at,
            active: self.is_active(index),
        }
    }

    pub fn entries(&self) -> Vec<RegistryEntry> {
        (0..self.history.len()).map(|i| self.entry(i)).collect()
    }

    pub fn history_of(&self, miid: Miid) -> Vec<RegistryEntry> {
        (0..self.history.len())
            .filter(|&i| self.history[i].miid == miid)
            .map(|i| self.entry(i))
            .collect()
    }

    pub fn lookup(&self, miid: Miid) -> Result<PublicKey, RegistryError> {
        let record = self
            .history
            .iter()
            .rev()
            .find(|r| r.miid == miid)
            .ok_or(RegistryError::NotFound(miid))?;
        Ok(PublicKey::from_bytes(&record.public_key)?)
    }

    /// Every key ever registered for `miid` at or before `at`, newest first.
    pub fn keys_as_of(&self, miid: Miid, at: IntervalNumber) -> Vec<PublicKey> {
        self.history
            .iter()
            .rev()
            .filter(|r| r.miid == miid && r.registered_at <= at)
            .filter_map(|r| PublicKey::from_bytes(&r.public_key).ok())
            .collect()
    }

    pub fn miids(&self) -> Vec<Miid> {
        let mut out: Vec<Miid> = self.history.iter().map(|r| r.miid).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Flags `miid` when more than `threshold` registrations fall in `window`.
    pub fn audit_key_churn(&self, miid: Miid, window: Range<IntervalNumber>, threshold: usize) -> ChurnReport {
        let registrations = self
            .history
            .iter()
            .filter(|r| r.miid == miid && window.contains(&r.registered_at))
            .count();
        ChurnReport {
            miid,
            window_start: window.start,
            window_end: window.end,
            registrations,
            threshold,
            flagged: registrations > threshold,
        }
    }

    /// Slides a window of `window_len` intervals over the MIID's history and
    /// returns the busiest placement (the first one that is flagged, if any).
    pub fn worst_churn(&self, miid: Miid, window_len: u32, threshold: usize) -> ChurnReport {
        let times: Vec<IntervalNumber> = self.history.iter().filter(|r| r.miid == miid).map(|r| r.registered_at).collect();
        let mut worst: Option<ChurnReport> = None;
        for &start in &times {
            let end = IntervalNumber::new(start.value().saturating_add(window_len));
            let report = self.audit_key_churn(miid, start..end, threshold);
            if worst.as_ref().is_none_or(|w| report.registrations > w.registrations) {
                worst = Some(report);
            }
        }
        worst.unwrap_or(ChurnReport {
            miid,
            window_start: IntervalNumber::new(0),
            window_end: IntervalNumber::new(window_len),
            registrations: 0,
            threshold,
            flagged: false,
        })
    }

    pub fn export_lines(&self) -> Vec<RegistryLine> {
        self.entries()
            .into_iter()
            .map(|e| RegistryLine {
                miid: e.miid,
                key: hex::encode(&e.public_key),
                registered_at: e.registered_at,
                active: e.active,
            })
            .collect()
    }

    /// JSON lines, one entry per line, in registration order.
    pub fn to_jsonl(&self) -> String {
        self.export_lines()
            .iter()
            .map(|line| serde_json::to_string(line).expect("registry line serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, RegistryError> {
        let mut registry = Registry::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let parsed: RegistryLine = serde_json::from_str(raw).map_err(|e| RegistryError::Import {
                line,
                message: e.to_string(),
            })?;
            let key = hex::decode(&parsed.key).map_err(|e| RegistryError::Import {
                line,
                message: e.to_string(),
            })?;
            registry.register(parsed.miid, &key, parsed.registered_at).map_err(|e| RegistryError::Import {
                line,
                message: e.to_string(),
            })?;
        }
        // The active flags are derived; a file whose flags disagree was edited.
        for (line, (stored, derived)) in text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .zip(registry.export_lines())
            .enumerate()
        {
            let stored: RegistryLine = serde_json::from_str(stored).expect("parsed above");
            if stored.active != derived.active {
                return Err(RegistryError::Import {
                    line: line + 1,
                    message: "active flag inconsistent with history".into(),
                });
            }
        }
        Ok(registry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindsig::InstituteKeyPair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn key(rng: &mut ChaCha20Rng, miid: &str) -> Vec<u8> {
        InstituteKeyPair::generate(rng, 128, Miid::new(miid).unwrap())
            .unwrap()
            .public_key()
            .to_bytes()
    }

    #[test]
    fn registration_and_lookup() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let miid = Miid::new("CLINIC").unwrap();
        let mut registry = Registry::new();
        let k1 = key(&mut rng, "CLINIC");
        let entry = registry.register(miid, &k1, IntervalNumber::new(10)).unwrap();
        assert!(entry.active);
        assert_eq!(registry.lookup(miid).unwrap().to_bytes(), k1);

        let k2 = key(&mut rng, "CLINIC");
        registry.register(miid, &k2, IntervalNumber::new(5000)).unwrap();
        let history = registry.history_of(miid);
        assert_eq!(history.len(), 2);
        assert_eq!(history.iter().filter(|e| e.active).count(), 1);
        assert!(history[1].active);
        assert_eq!(registry.lookup(miid).unwrap().to_bytes(), k2);

        assert_eq!(
            registry.register(miid, &k1, IntervalNumber::new(6000)),
            Err(RegistryError::DuplicateKey(miid))
        );
        assert_eq!(registry.keys_as_of(miid, IntervalNumber::new(100)).len(), 1);
    }

    #[test]
    fn bad_registrations() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut registry = Registry::new();
        let miid = Miid::new("X").unwrap();
        assert!(matches!(
            registry.register(miid, &[1, 2, 3], IntervalNumber::new(0)),
            Err(RegistryError::MalformedKey(_))
        ));
        let other = key(&mut rng, "Y");
        assert!(matches!(
            registry.register(miid, &other, IntervalNumber::new(0)),
            Err(RegistryError::MiidMismatch { .. })
        ));
        assert_eq!(registry.lookup(miid).unwrap_err(), RegistryError::NotFound(miid));
    }

    #[test]
    fn churn_audit() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let miid = Miid::new("M").unwrap();
        let mut monthly = Registry::new();
        for month in 0..4u32 {
            monthly
                .register(miid, &key(&mut rng, "M"), IntervalNumber::new(month * 30 * 144))
                .unwrap();
        }
        assert!(!monthly.worst_churn(miid, DEFAULT_CHURN_WINDOW, DEFAULT_CHURN_THRESHOLD).flagged);

        let mut burst = Registry::new();
        for i in 0..5u32 {
            burst.register(miid, &key(&mut rng, "M"), IntervalNumber::new(144 * 3 + i * 20)).unwrap();
        }
        let day = IntervalNumber::new(144 * 3)..IntervalNumber::new(144 * 4);
        let report = burst.audit_key_churn(miid, day, DEFAULT_CHURN_THRESHOLD);
        assert_eq!(report.registrations, 5);
        assert!(report.flagged);
        assert!(burst.worst_churn(miid, DEFAULT_CHURN_WINDOW, 1).flagged);

        let empty = Registry::new();
        assert!(!empty.worst_churn(miid, DEFAULT_CHURN_WINDOW, 1).flagged);
        assert!(!empty.audit_key_churn(miid, day_range(), 1).flagged);
    }

    fn day_range() -> Range<IntervalNumber> {
        IntervalNumber::new(0)..IntervalNumber::new(144)
    }

    #[test]
    fn jsonl_round_trip_and_tamper_detection() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut registry = Registry::new();
        for (i, name) in ["A", "B", "A"].iter().enumerate() {
            registry
                .register(Miid::new(name).unwrap(), &key(&mut rng, name), IntervalNumber::new(i as u32 * 100))
                .unwrap();
        }
        let text = registry.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().next().unwrap().contains("\"active\":false"));
        let back = Registry::from_jsonl(&text).unwrap();
        assert_eq!(back.entries(), registry.entries());

        let edited = text.replacen("\"active\":false", "\"active\":true", 1);
        assert!(matches!(Registry::from_jsonl(&edited), Err(RegistryError::Import { line: 1, .. })));
    }
}
