use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keys::{IntervalNumber, INTERVALS_PER_DAY};

/// 2021-01-01T00:00:00Z.
pub const DEFAULT_START_INTERVAL: u32 = 2_682_432;
pub const MIN_KEY_BITS: usize = 512;
/// Intervals an accomplice spends next to the target before reporting.
pub const ACCOMPLICE_CONTACT_INTERVALS: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("scenario does not parse: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown threat id {0:?}; expected one of 1a 1b 1c 1d 1e 2a 2b 3a")]
    UnknownThreat(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ThreatId {
    /// Platform substitutes its own marker key for the application's TEK.
    #[serde(rename = "1a")]
    MarkerKey,
    /// Platform sends an extra beacon with arbitrary content.
    #[serde(rename = "1b")]
    ArbitraryBeacon,
    /// Platform hides a marker in the associated metadata.
    #[serde(rename = "1c")]
    MetadataMarker,
    /// Platform quietly collects received beacons.
    #[serde(rename = "1d")]
    BeaconCollector,
    /// Platform shows a notification no match supports.
    #[serde(rename = "1e")]
    FalseNotification,
    /// Accomplice meets the target, then reports with valid endorsements.
    #[serde(rename = "2a")]
    SignedAgent,
    /// Accomplice meets the target; a complicit ledger publishes its unsigned report.
    #[serde(rename = "2b")]
    UnsignedAgent,
    /// Complicit institute endorses and submits a victim's key without consent.
    #[serde(rename = "3a")]
    FakeReport,
}

impl ThreatId {
    pub const ALL: [ThreatId; 8] = [
        ThreatId::MarkerKey,
        ThreatId::ArbitraryBeacon,
        ThreatId::MetadataMarker,
        ThreatId::BeaconCollector,
        ThreatId::FalseNotification,
        ThreatId::SignedAgent,
        ThreatId::UnsignedAgent,
        ThreatId::FakeReport,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ThreatId::MarkerKey => "1a",
            ThreatId::ArbitraryBeacon => "1b",
            ThreatId::MetadataMarker => "1c",
            ThreatId::BeaconCollector => "1d",
            ThreatId::FalseNotification => "1e",
            ThreatId::SignedAgent => "2a",
            ThreatId::UnsignedAgent => "2b",
            ThreatId::FakeReport => "3a",
        }
    }

    pub fn needs_accomplice(self) -> bool {
        matches!(self, ThreatId::SignedAgent | ThreatId::UnsignedAgent)
    }
}

impl fmt::Display for ThreatId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ThreatId {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ThreatId::ALL
            .into_iter()
            .find(|t| t.code() == s)
            .ok_or_else(|| ScenarioError::UnknownThreat(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mobility {
    pub meetings_per_day: u32,
    #[serde(default = "default_group")]
    pub max_group_size: u32,
    #[serde(default = "default_meeting")]
    pub max_meeting_intervals: u32,
}

/// Agents that share a location for `duration` intervals from offset `at`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactSpec {
    pub at: u32,
    #[serde(default = "one_u32")]
    pub duration: u32,
    pub agents: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReporterSpec {
    pub agent: u32,
    pub test_at: u32,
    #[serde(default)]
    pub institute: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreatSpec {
    pub threat: ThreatId,
    pub target: u32,
    pub at: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accomplice: Option<u32>,
}

/// A complete run description. All offsets count intervals from `start_interval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub agents: u32,
    pub duration: u32,
    #[serde(default = "default_start")]
    pub start_interval: u32,
    #[serde(default = "default_epoch")]
    pub epoch_length: u32,
    #[serde(default = "one_usize")]
    pub match_threshold: usize,
    #[serde(default = "one_u64")]
    pub blocks_per_interval: u64,
    #[serde(default = "default_key_bits")]
    pub key_bits: usize,
    #[serde(default = "one_u32")]
    pub institutes: u32,
    #[serde(default = "default_epoch")]
    pub token_validity: u32,
    /// Phones download after every `download_every` epochs.
    #[serde(default = "one_u32")]
    pub download_every: u32,
    #[serde(default)]
    pub beacon_loss: f64,
    #[serde(default = "default_tx_power")]
    pub tx_power: i8,
    #[serde(default)]
    pub random_reporters: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mobility: Option<Mobility>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contacts: Vec<ContactSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reporters: Vec<ReporterSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub threats: Vec<ThreatSpec>,
}

fn default_start() -> u32 {
    DEFAULT_START_INTERVAL
}
fn default_epoch() -> u32 {
    INTERVALS_PER_DAY
}
fn default_key_bits() -> usize {
    crate::blindsig::PRODUCTION_MODULUS_BITS
}
fn default_tx_power() -> i8 {
    -8
}
fn default_group() -> u32 {
    4
}
fn default_meeting() -> u32 {
    6
}
fn one_u32() -> u32 {
    1
}
fn one_u64() -> u64 {
    1
}
fn one_usize() -> usize {
    1
}

impl Scenario {
    /// A scenario with defaults for everything but the population and length.
    pub fn new(agents: u32, duration: u32) -> Self {
        Self {
            seed: 0,
            agents,
            duration,
            start_interval: DEFAULT_START_INTERVAL,
            epoch_length: default_epoch(),
            match_threshold: 1,
            blocks_per_interval: 1,
            key_bits: default_key_bits(),
            institutes: 1,
            token_validity: default_epoch(),
            download_every: 1,
            beacon_loss: 0.0,
            tx_power: default_tx_power(),
            random_reporters: 0,
            mobility: None,
            contacts: Vec::new(),
            reporters: Vec::new(),
            threats: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Self = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes to TOML")
    }

    pub fn start(&self) -> IntervalNumber {
        IntervalNumber::new(self.start_interval)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.agents == 0 {
            return Err(invalid("agents", "must be at least 1"));
        }
        if self.duration == 0 {
            return Err(invalid("duration", "must be at least 1 interval"));
        }
        if !self.start().is_day_aligned() {
            return Err(invalid("start_interval", format!("{} is not a multiple of {INTERVALS_PER_DAY}", self.start_interval)));
        }
        if self.start_interval.checked_add(self.duration).is_none() {
            return Err(invalid("duration", "run extends past the last interval number"));
        }
        if self.epoch_length == 0 {
            return Err(invalid("epoch_length", "must be positive"));
        }
        if self.match_threshold == 0 {
            return Err(invalid("match_threshold", "must be at least 1"));
        }
        if self.blocks_per_interval == 0 {
            return Err(invalid("blocks_per_interval", "must be positive"));
        }
        if self.key_bits < MIN_KEY_BITS {
            return Err(invalid("key_bits", format!("must be at least {MIN_KEY_BITS}")));
        }
        if self.institutes == 0 || self.institutes > 999 {
            return Err(invalid("institutes", "must be between 1 and 999"));
        }
        if self.token_validity == 0 {
            return Err(invalid("token_validity", "must be positive"));
        }
        if self.download_every == 0 {
            return Err(invalid("download_every", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beacon_loss) {
            return Err(invalid("beacon_loss", "must be in [0, 1)"));
        }
        if let Some(m) = &self.mobility {
            if m.max_group_size < 2 || m.max_group_size > self.agents {
                return Err(invalid("mobility.max_group_size", format!("must be between 2 and agents ({})", self.agents)));
            }
            if m.max_meeting_intervals == 0 {
                return Err(invalid("mobility.max_meeting_intervals", "must be positive"));
            }
        }
        for (i, c) in self.contacts.iter().enumerate() {
            let field = |f: &str| format!("contacts[{i}].{f}");
            if c.at >= self.duration {
                return Err(invalid(field("at"), "must fall inside the run"));
            }
            if c.duration == 0 {
                return Err(invalid(field("duration"), "must be positive"));
            }
            if c.agents.len() < 2 {
                return Err(invalid(field("agents"), "needs at least two agents"));
            }
            let mut seen = BTreeSet::new();
            for (k, &a) in c.agents.iter().enumerate() {
                if a >= self.agents {
                    return Err(invalid(format!("contacts[{i}].agents[{k}]"), format!("agent {a} does not exist")));
                }
                if !seen.insert(a) {
                    return Err(invalid(format!("contacts[{i}].agents[{k}]"), format!("agent {a} listed twice")));
                }
            }
        }
        let mut reporters = BTreeSet::new();
        for (i, r) in self.reporters.iter().enumerate() {
            let field = |f: &str| format!("reporters[{i}].{f}");
            if r.agent >= self.agents {
                return Err(invalid(field("agent"), format!("agent {} does not exist", r.agent)));
            }
            if !reporters.insert(r.agent) {
                return Err(invalid(field("agent"), format!("agent {} already reports", r.agent)));
            }
            if r.test_at >= self.duration {
                return Err(invalid(field("test_at"), "must fall inside the run"));
            }
            if r.institute >= self.institutes {
                return Err(invalid(field("institute"), format!("institute {} does not exist", r.institute)));
            }
        }
        if self.reporters.len() as u64 + u64::from(self.random_reporters) > u64::from(self.agents) {
            return Err(invalid("random_reporters", "more reporters than agents"));
        }
        for (i, t) in self.threats.iter().enumerate() {
            let field = |f: &str| format!("threats[{i}].{f}");
            if t.target >= self.agents {
                return Err(invalid(field("target"), format!("agent {} does not exist", t.target)));
            }
            if t.at >= self.duration {
                return Err(invalid(field("at"), "must fall inside the run"));
            }
            match (t.threat.needs_accomplice(), t.accomplice) {
                (true, None) => return Err(invalid(field("accomplice"), format!("threat {} needs an accomplice", t.threat))),
                (true, Some(a)) if a >= self.agents => {
                    return Err(invalid(field("accomplice"), format!("agent {a} does not exist")))
                }
                (true, Some(a)) if a == t.target => return Err(invalid(field("accomplice"), "must differ from the target")),
                (true, Some(_)) if t.at + ACCOMPLICE_CONTACT_INTERVALS >= self.duration => {
                    return Err(invalid(field("at"), "accomplice needs time to meet the target and report"))
                }
                (false, Some(_)) => return Err(invalid(field("accomplice"), format!("threat {} takes no accomplice", t.threat))),
                _ => {}
            }
        }
        Ok(())
    }

    /// Copy of the scenario with one more threat injection.
    pub fn inject_threat(&self, threat: ThreatSpec) -> Result<Scenario, ScenarioError> {
        let mut next = self.clone();
        next.threats.push(threat);
        next.validate()?;
        Ok(next)
    }
}
