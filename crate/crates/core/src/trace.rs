//! Instrumented run record consumed by the auditor.
//!
//! On disk a trace is a directory:
//!
//! ```text
//! trace.ndjson              one tagged JSON record per line, header first
//! chain.json                chain export
//! registry.jsonl            registry export
//! publications/manifest.json
//! publications/epoch-NNNNNN.bin
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::ChainExport;
use crate::blindsig::Miid;
use crate::keys::{IntervalNumber, TEK_LEN};
use crate::merkle::Digest;
use crate::protocol::{
    AgentId, ConsentRecord, EpochPublication, ExposureNotification, LedgerTiming, ProtocolError, TranscriptEntry,
};
use crate::registry::{Registry, RegistryError};

pub const TRACE_FILE: &str = "trace.ndjson";
pub const CHAIN_FILE: &str = "chain.json";
pub const REGISTRY_FILE: &str = "registry.jsonl";
pub const PUBLICATIONS_DIR: &str = "publications";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Publication { path: PathBuf, source: ProtocolError },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("trace has no run header")]
    MissingHeader,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHeader {
    pub seed: u64,
    pub agents: u32,
    pub duration: u32,
    pub timing: LedgerTiming,
    pub match_threshold: usize,
    pub institutes: Vec<Miid>,
}

/// A beacon on the air, attributed to the phone that sent it (radio) or the
/// phone whose second device heard it (capture).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeaconTrace {
    pub phone: AgentId,
    pub interval: IntervalNumber,
    #[serde(with = "crate::hexser::array")]
    pub rpi: [u8; 16],
    #[serde(with = "crate::hexser::array")]
    pub aem: [u8; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TekTrace {
    pub phone: AgentId,
    #[serde(with = "crate::hexser::array")]
    pub tek: [u8; TEK_LEN],
    pub base_interval: IntervalNumber,
    pub tx_power: i8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentTrace {
    pub phone: AgentId,
    pub record: ConsentRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationTrace {
    pub phone: AgentId,
    pub notification: ExposureNotification,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicationTrace {
    pub epoch_id: u32,
    pub file: String,
    pub root: Digest,
    pub anchor_block: u64,
    pub already_stored: bool,
    pub finalized_at: IntervalNumber,
    pub report_count: usize,
    pub digest_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionTrace {
    pub phone: AgentId,
    pub epoch_id: u32,
    pub reason: String,
    pub at: IntervalNumber,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Run(RunHeader),
    Tek(TekTrace),
    Radio(BeaconTrace),
    Capture(BeaconTrace),
    Transcript(TranscriptEntry),
    Consent(ConsentTrace),
    Publication(PublicationTrace),
    Notification(NotificationTrace),
    Rejection(RejectionTrace),
}

impl TraceRecord {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceRecord::Run(_) => "run",
            TraceRecord::Tek(_) => "tek",
            TraceRecord::Radio(_) => "radio",
            TraceRecord::Capture(_) => "capture",
            TraceRecord::Transcript(_) => "transcript",
            TraceRecord::Consent(_) => "consent",
            TraceRecord::Publication(_) => "publication",
            TraceRecord::Notification(_) => "notification",
            TraceRecord::Rejection(_) => "rejection",
        }
    }
}

/// Reference to a record by its line in `trace.ndjson` (1-based).
pub fn record_ref(index: usize, record: &TraceRecord) -> String {
    format!("{}@{}", record.kind(), index + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub epoch_id: u32,
    pub file: String,
    pub root: Digest,
    pub anchor_block: u64,
    pub report_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicationManifest {
    pub timing: LedgerTiming,
    pub epochs: Vec<ManifestEntry>,
}

impl PublicationManifest {
    pub fn read_dir(dir: &Path) -> Result<(Self, Vec<EpochPublication>), TraceError> {
        let path = dir.join(MANIFEST_FILE);
        let manifest: Self = parse_json(&path, &read_string(&path)?)?;
        let mut publications = Vec::with_capacity(manifest.epochs.len());
        for entry in &manifest.epochs {
            let path = dir.join(&entry.file);
            publications.push(read_publication(&path)?);
        }
        Ok((manifest, publications))
    }
}

pub fn publication_file_name(epoch_id: u32) -> String {
    format!("epoch-{epoch_id:06}.bin")
}

pub fn read_publication(path: &Path) -> Result<EpochPublication, TraceError> {
    let bytes = fs::read(path).map_err(|source| TraceError::Io { path: path.to_owned(), source })?;
    EpochPublication::decode(&bytes).map_err(|source| TraceError::Publication { path: path.to_owned(), source })
}

/// The complete audit input: the record log plus the public artifacts.
#[derive(Debug, Clone)]
pub struct AuditTrace {
    pub records: Vec<TraceRecord>,
    pub publications: BTreeMap<u32, EpochPublication>,
    pub chain: ChainExport,
    pub registry: Registry,
}

impl AuditTrace {
    pub fn header(&self) -> Option<&RunHeader> {
        self.records.iter().find_map(|r| match r {
            TraceRecord::Run(h) => Some(h),
            _ => None,
        })
    }

    pub fn teks(&self) -> impl Iterator<Item = (usize, &TekTrace)> {
        self.records.iter().enumerate().filter_map(|(i, r)| match r {
            TraceRecord::Tek(t) => Some((i, t)),
            _ => None,
        })
    }

    pub fn radio(&self) -> impl Iterator<Item = (usize, &BeaconTrace)> {
        self.records.iter().enumerate().filter_map(|(i, r)| match r {
            TraceRecord::Radio(b) => Some((i, b)),
            _ => None,
        })
    }

    pub fn captures(&self) -> impl Iterator<Item = (usize, &BeaconTrace)> {
        self.records.iter().enumerate().filter_map(|(i, r)| match r {
            TraceRecord::Capture(b) => Some((i, b)),
            _ => None,
        })
    }

    pub fn consents(&self) -> impl Iterator<Item = (usize, &ConsentTrace)> {
        self.records.iter().enumerate().filter_map(|(i, r)| match r {
            TraceRecord::Consent(c) => Some((i, c)),
            _ => None,
        })
    }

    pub fn publication_records(&self) -> impl Iterator<Item = (usize, &PublicationTrace)> {
        self.records.iter().enumerate().filter_map(|(i, r)| match r {
            TraceRecord::Publication(p) => Some((i, p)),
            _ => None,
        })
    }

    pub fn notifications(&self) -> impl Iterator<Item = (usize, &NotificationTrace)> {
        self.records.iter().enumerate().filter_map(|(i, r)| match r {
            TraceRecord::Notification(n) => Some((i, n)),
            _ => None,
        })
    }

    pub fn rejections(&self) -> impl Iterator<Item = (usize, &RejectionTrace)> {
        self.records.iter().enumerate().filter_map(|(i, r)| match r {
            TraceRecord::Rejection(n) => Some((i, n)),
            _ => None,
        })
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn manifest(&self) -> Option<PublicationManifest> {
        let timing = self.header()?.timing;
        let epochs = self
            .publications
            .values()
            .map(|p| ManifestEntry {
                epoch_id: p.epoch_id,
                file: publication_file_name(p.epoch_id),
                root: p.root,
                anchor_block: p.anchor_block,
                report_count: p.reports.len(),
            })
            .collect();
        Some(PublicationManifest { timing, epochs })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), TraceError> {
        let manifest = self.manifest().ok_or(TraceError::MissingHeader)?;
        let pub_dir = dir.join(PUBLICATIONS_DIR);
        create_dir(&pub_dir)?;
        write_file(&dir.join(TRACE_FILE), self.to_ndjson().as_bytes())?;
        let chain = serde_json::to_string_pretty(&self.chain).expect("chain export serializes");
        write_file(&dir.join(CHAIN_FILE), chain.as_bytes())?;
        write_file(&dir.join(REGISTRY_FILE), self.registry.to_jsonl().as_bytes())?;
        for publication in self.publications.values() {
            write_file(&pub_dir.join(publication_file_name(publication.epoch_id)), &publication.encode())?;
        }
        let manifest = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&pub_dir.join(MANIFEST_FILE), manifest.as_bytes())?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, TraceError> {
        let trace_path = dir.join(TRACE_FILE);
        let text = read_string(&trace_path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(line).map_err(|e| TraceError::Parse {
                path: trace_path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }

        let chain_path = dir.join(CHAIN_FILE);
        let chain: ChainExport = parse_json(&chain_path, &read_string(&chain_path)?)?;
        let registry = Registry::from_jsonl(&read_string(&dir.join(REGISTRY_FILE))?)?;

        let mut publications = BTreeMap::new();
        for record in &records {
            if let TraceRecord::Publication(p) = record {
                let path = dir.join(PUBLICATIONS_DIR).join(&p.file);
                publications.insert(p.epoch_id, read_publication(&path)?);
            }
        }
        let trace = Self { records, publications, chain, registry };
        trace.header().ok_or(TraceError::MissingHeader)?;
        Ok(trace)
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, TraceError> {
    serde_json::from_str(text).map_err(|e| TraceError::Parse { path: path.to_owned(), line: e.line(), message: e.to_string() })
}

pub(crate) fn read_string(path: &Path) -> Result<String, TraceError> {
    fs::read_to_string(path).map_err(|source| TraceError::Io { path: path.to_owned(), source })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TraceError> {
    fs::write(path, bytes).map_err(|source| TraceError::Io { path: path.to_owned(), source })
}

pub(crate) fn create_dir(path: &Path) -> Result<(), TraceError> {
    fs::create_dir_all(path).map_err(|source| TraceError::Io { path: path.to_owned(), source })
}
