//! Deterministic scenario runner: contact model, test and report timeline,
//! threat injection, ground-truth oracle, metrics and trace output.

use sha2::{Digest as _, Sha256};

mod oracle;
mod run;
mod scenario;

pub use oracle::{
    download_offset, expected_for, oracle_expected_notifications, planned_reporters, reported_windows, ContactOracle,
    ContactSchedule, NotificationKey, ReportedWindow,
};
pub use run::{run, RunMetrics, RunOutput, SimError, ThreatEvent, METRICS_FILE, PHONES_DIR, SCENARIO_FILE};
pub use scenario::{
    ContactSpec, Mobility, ReporterSpec, Scenario, ScenarioError, ThreatId, ThreatSpec, ACCOMPLICE_CONTACT_INTERVALS,
    DEFAULT_START_INTERVAL, MIN_KEY_BITS,
};

/// Independent 32-byte seed for one component of a run.
pub fn sub_seed(seed: u64, label: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"openexposure-sim");
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u32).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}
