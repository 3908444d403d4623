//! Protocol actors: phones, medical institutes, the ledger server, the
//! publication format they share, and the message fabric that orders
//! deliveries between them.

use thiserror::Error;

use crate::blindsig::{BlindSigError, Miid};
use crate::keys::{IntervalNumber, KeyScheduleError};
use crate::merkle::MerkleError;

mod fabric;
mod institute;
mod ledger;
mod phone;
mod publication;
mod report;

pub use fabric::{ActorId, Envelope, MessageFabric};
pub use institute::{InstituteError, MedicalInstitute, TestToken, TranscriptEntry, MAX_KEYS_PER_REQUEST};
pub use ledger::{FinalizedEpoch, LedgerError, LedgerServer, LedgerStats, ReportRejection};
pub use phone::{
    BeaconPayload, ConsentRecord, DownloadOutcome, ExposureNotification, Phone, PhoneConfig, PhoneState, StoredBeacon,
    TekLogEntry, BEACON_RETENTION,
};
pub use publication::{verify_publication, EpochPublication, LedgerTiming, PublicationRejection};
pub use report::{verify_against_registry, EndorsedReport, REPORT_VERSION};

/// Index of a simulated person and their phone.
pub type AgentId = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("need {needed} bytes, only {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported report version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("institute identifier is not printable ASCII")]
    MalformedMiid,
    #[error(transparent)]
    Key(#[from] KeyScheduleError),
    #[error(transparent)]
    Signature(#[from] BlindSigError),
    #[error(transparent)]
    Merkle(#[from] MerkleError),
    #[error("institute {0} has no registered key")]
    UnknownInstitute(Miid),
    #[error("no key covers interval {0}")]
    NoCurrentKey(IntervalNumber),
    #[error("institute returned a signature that does not verify")]
    InvalidEndorsement,
    #[error(transparent)]
    Institute(#[from] InstituteError),
}
