//! Consumer-group audit over an instrumented run.
//!
//! | check | looks at | mapped threat |
//! |-------|----------|---------------|
//! | A | app TEK log vs. every radio beacon, per sender-day | 1a |
//! | B | per-beacon RPI on sender-days that do use the app key | 1b |
//! | C | decrypted metadata of correctly derived beacons | 1c |
//! | D | signatures of published reports, registry key churn | 2b |
//! | E | anchoring of publications, consent for published keys | 3a |
//! | F | notifications vs. second-device capture | 1e |
//!
//! A and B split the underivable beacons between them: a sender-day with no
//! derivable beacon at all means the broadcast key is not the logged one (A);
//! stray beacons next to correctly derived ones are injected content (B).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::SimChain;
use crate::keys::{DerivedKeys, IntervalNumber, MetadataPlaintext, RollingProximityId, TemporaryExposureKey, TEK_LEN};
use crate::protocol::{verify_publication, AgentId, EpochPublication};
use crate::registry::{DEFAULT_CHURN_THRESHOLD, DEFAULT_CHURN_WINDOW};
use crate::trace::{record_ref, AuditTrace};

/// Evidence lists are truncated to this many references; the full count is kept.
pub const MAX_EVIDENCE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CheckId {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl CheckId {
    pub const ALL: [CheckId; 6] = [CheckId::A, CheckId::B, CheckId::C, CheckId::D, CheckId::E, CheckId::F];

    /// Threat row this check answers for.
    pub fn threat(self) -> &'static str {
        match self {
            CheckId::A => "1a",
            CheckId::B => "1b",
            CheckId::C => "1c",
            CheckId::D => "2b",
            CheckId::E => "3a",
            CheckId::F => "1e",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            CheckId::A => "TEK generation",
            CheckId::B => "beacon content",
            CheckId::C => "associated metadata",
            CheckId::D => "reporting",
            CheckId::E => "stored reports",
            CheckId::F => "exposure matching",
        }
    }
}

impl std::fmt::Display for CheckId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Clean,
    Suspected,
    Detected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub check: CheckId,
    pub threat: String,
    pub verdict: Verdict,
    pub summary: String,
    pub evidence: Vec<String>,
    pub evidence_total: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl AuditFinding {
    fn new(check: CheckId) -> Self {
        Self {
            check,
            threat: check.threat().to_owned(),
            verdict: Verdict::Clean,
            summary: String::new(),
            evidence: Vec::new(),
            evidence_total: 0,
            notes: Vec::new(),
        }
    }

    fn flag(&mut self, verdict: Verdict, evidence: String) {
        self.verdict = self.verdict.max(verdict);
        self.evidence_total += 1;
        if self.evidence.len() < MAX_EVIDENCE {
            self.evidence.push(evidence);
        }
    }

    pub fn is_clean(&self) -> bool {
        self.verdict == Verdict::Clean
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub findings: Vec<AuditFinding>,
    pub verdict: Verdict,
    /// Threats outside what the checks can observe.
    pub out_of_scope: BTreeMap<String, String>,
}

impl AuditReport {
    pub fn detected(&self) -> bool {
        self.verdict == Verdict::Detected
    }

    pub fn finding(&self, check: CheckId) -> &AuditFinding {
        self.findings.iter().find(|f| f.check == check).expect("one finding per check")
    }

    pub fn non_clean(&self) -> Vec<CheckId> {
        self.findings.iter().filter(|f| !f.is_clean()).map(|f| f.check).collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuditError {
    #[error("check {check} is inconclusive: {reason}")]
    Inconclusive { check: CheckId, reason: String },
}

fn tek_of(tek: [u8; TEK_LEN], base: IntervalNumber) -> Option<TemporaryExposureKey> {
    TemporaryExposureKey::from_published(tek, base).ok()
}

/// All 144 identifiers of a key, computed with one cipher instance for the whole window.
pub fn rederive_window(tek: &TemporaryExposureKey) -> Vec<RollingProximityId> {
    DerivedKeys::new(tek).window()
}

struct LoggedKey {
    keys: DerivedKeys,
    window: Vec<RollingProximityId>,
    tx_power: i8,
}

impl LoggedKey {
    fn derives(&self, interval: IntervalNumber, rpi: &[u8; 16]) -> bool {
        let Some(first) = self.window.first() else { return false };
        interval
            .value()
            .checked_sub(first.interval.value())
            .and_then(|k| self.window.get(k as usize))
            .is_some_and(|expected| &expected.id == rpi)
    }
}

fn logged_keys(trace: &AuditTrace) -> HashMap<(AgentId, IntervalNumber), LoggedKey> {
    let mut out = HashMap::new();
    for (_, t) in trace.teks() {
        if let Some(tek) = tek_of(t.tek, t.base_interval) {
            out.insert(
                (t.phone, t.base_interval),
                LoggedKey { keys: DerivedKeys::new(&tek), window: rederive_window(&tek), tx_power: t.tx_power },
            );
        }
    }
    out
}

fn require_tek_log(trace: &AuditTrace, check: CheckId) -> Result<(), AuditError> {
    if trace.radio().next().is_some() && trace.teks().next().is_none() {
        return Err(AuditError::Inconclusive { check, reason: "radio capture present but no application TEK log".into() });
    }
    Ok(())
}

struct SenderDay {
    total: usize,
    derivable: usize,
    underivable: Vec<usize>,
}

fn sender_days(trace: &AuditTrace, keys: &HashMap<(AgentId, IntervalNumber), LoggedKey>) -> BTreeMap<(AgentId, IntervalNumber), SenderDay> {
    let mut days: BTreeMap<(AgentId, IntervalNumber), SenderDay> = BTreeMap::new();
    for (i, beacon) in trace.radio() {
        let day = beacon.interval.day_start();
        let entry = days.entry((beacon.phone, day)).or_insert(SenderDay { total: 0, derivable: 0, underivable: Vec::new() });
        entry.total += 1;
        let ok = keys.get(&(beacon.phone, day)).is_some_and(|k| k.derives(beacon.interval, &beacon.rpi));
        if ok {
            entry.derivable += 1;
        } else {
            entry.underivable.push(i);
        }
    }
    days
}

/// Every sender-day on the air must be derivable from a key the application logged.
pub fn check_a_tek_generation(trace: &AuditTrace) -> Result<AuditFinding, AuditError> {
    require_tek_log(trace, CheckId::A)?;
    let keys = logged_keys(trace);
    let mut finding = AuditFinding::new(CheckId::A);
    let mut days_checked = 0;
    for ((phone, day), stats) in sender_days(trace, &keys) {
        days_checked += 1;
        if stats.derivable > 0 {
            continue;
        }
        let logged = keys.contains_key(&(phone, day));
        let first = stats.underivable[0];
        finding.flag(
            Verdict::Detected,
            format!(
                "{}: phone {phone} day {day}: {} beacons, none derivable ({})",
                record_ref(first, &trace.records[first]),
                stats.total,
                if logged { "broadcast key differs from the logged key" } else { "no key logged for this day" }
            ),
        );
    }
    finding.summary = match finding.verdict {
        Verdict::Clean => format!("{days_checked} sender-days derive from logged application keys"),
        _ => format!("{} of {days_checked} sender-days broadcast under a key the application never logged", finding.evidence_total),
    };
    Ok(finding)
}

/// Each beacon's RPI must equal the one derived from the sender's logged key.
pub fn check_b_beacon_content(trace: &AuditTrace) -> Result<AuditFinding, AuditError> {
    require_tek_log(trace, CheckId::B)?;
    let keys = logged_keys(trace);
    let mut finding = AuditFinding::new(CheckId::B);
    let mut checked = 0;
    for stats in sender_days(trace, &keys).values() {
        checked += stats.total;
        if stats.derivable == 0 {
            continue;
        }
        for &i in &stats.underivable {
            finding.flag(Verdict::Detected, record_ref(i, &trace.records[i]));
        }
    }
    if finding.verdict != Verdict::Clean {
        finding.notes.push(
            "beacons carry content not derived from the application key; receivers' platforms may be running a hidden collector"
                .into(),
        );
    }
    finding.summary = format!("{} of {checked} beacons do not match the expected RPI", finding.evidence_total);
    Ok(finding)
}

/// Decrypted metadata of each correctly derived beacon must be the expected plaintext.
pub fn check_c_metadata(trace: &AuditTrace) -> Result<AuditFinding, AuditError> {
    require_tek_log(trace, CheckId::C)?;
    let keys = logged_keys(trace);
    let mut finding = AuditFinding::new(CheckId::C);
    let mut checked = 0;
    for (i, beacon) in trace.radio() {
        let Some(key) = keys.get(&(beacon.phone, beacon.interval.day_start())) else { continue };
        if !key.derives(beacon.interval, &beacon.rpi) {
            continue;
        }
        checked += 1;
        let plain = key.keys.decrypt_metadata(beacon.interval, beacon.aem);
        let expected = MetadataPlaintext::new(key.tx_power).to_bytes();
        if plain != expected {
            finding.flag(
                Verdict::Detected,
                format!("{}: metadata {} expected {}", record_ref(i, &trace.records[i]), hex::encode(plain), hex::encode(expected)),
            );
        }
    }
    if finding.verdict != Verdict::Clean {
        finding.notes.push("metadata carries data beyond version and transmit power".into());
    }
    finding.summary = format!("{} of {checked} decrypted metadata blocks differ from the expected plaintext", finding.evidence_total);
    Ok(finding)
}

fn publication_time(trace: &AuditTrace) -> HashMap<u32, (usize, IntervalNumber)> {
    trace.publication_records().map(|(i, p)| (p.epoch_id, (i, p.finalized_at))).collect()
}

/// Every published report must verify under a key its institute had
/// registered by the time the epoch closed. Key churn is suspicious.
pub fn check_d_reporting(trace: &AuditTrace) -> Result<AuditFinding, AuditError> {
    let mut finding = AuditFinding::new(CheckId::D);
    let times = publication_time(trace);
    let mut checked = 0;
    for (epoch, publication) in &trace.publications {
        let Some(&(line, finalized_at)) = times.get(epoch) else {
            finding.flag(Verdict::Detected, format!("epoch {epoch}: publication without a ledger record"));
            continue;
        };
        for (k, report) in publication.reports.iter().enumerate() {
            checked += 1;
            let keys = trace.registry.keys_as_of(report.miid, finalized_at);
            if keys.is_empty() {
                finding.flag(
                    Verdict::Detected,
                    format!("{}: report {k} cites unregistered institute {}", record_ref(line, &trace.records[line]), report.miid),
                );
            } else if !keys.iter().any(|key| report.verify(key)) {
                finding.flag(
                    Verdict::Detected,
                    format!(
                        "{}: report {k} signature does not verify under any key of {}",
                        record_ref(line, &trace.records[line]),
                        report.miid
                    ),
                );
            }
        }
    }
    let mut churned = Vec::new();
    for miid in trace.registry.miids() {
        let report = trace.registry.worst_churn(miid, DEFAULT_CHURN_WINDOW, DEFAULT_CHURN_THRESHOLD);
        if report.flagged {
            churned.push(miid);
            finding.flag(
                Verdict::Suspected,
                format!(
                    "registry: {miid} registered {} keys within [{}, {})",
                    report.registrations, report.window_start, report.window_end
                ),
            );
        }
    }
    if !churned.is_empty() {
        finding.notes.push("frequent key changes let an institute link endorsements to reporters".into());
    }
    finding.summary = format!("{checked} published reports checked, {} findings", finding.evidence_total);
    Ok(finding)
}

/// Publications must be anchored as published, and every published key that
/// a phone generated must come with that phone's consent.
pub fn check_e_stored_reports(trace: &AuditTrace) -> Result<AuditFinding, AuditError> {
    let mut finding = AuditFinding::new(CheckId::E);
    let header = trace.header().ok_or_else(|| AuditError::Inconclusive {
        check: CheckId::E,
        reason: "trace has no run header".into(),
    })?;
    let chain = SimChain::from_export(&trace.chain)
        .map_err(|e| AuditError::Inconclusive { check: CheckId::E, reason: e.to_string() })?;

    for (i, record) in trace.publication_records() {
        let here = record_ref(i, &trace.records[i]);
        let Some(publication) = trace.publications.get(&record.epoch_id) else {
            finding.flag(Verdict::Detected, format!("{here}: publication file missing"));
            continue;
        };
        if publication.root != record.root {
            finding.flag(Verdict::Detected, format!("{here}: file root {} differs from ledger record {}", publication.root, record.root));
        }
        if let Err(rejection) = verify_publication(publication, &chain, &header.timing) {
            finding.flag(Verdict::Detected, format!("{here}: {rejection}"));
        }
        if record.already_stored {
            finding.flag(Verdict::Suspected, format!("{here}: root was already anchored before this epoch"));
        }
    }
    for (i, rejection) in trace.rejections() {
        finding.flag(Verdict::Detected, format!("{}: phone {} rejected epoch {}", record_ref(i, &trace.records[i]), rejection.phone, rejection.epoch_id));
    }

    let owners: HashMap<([u8; TEK_LEN], IntervalNumber), AgentId> =
        trace.teks().map(|(_, t)| ((t.tek, t.base_interval), t.phone)).collect();
    // Earliest consent per key; a key published before its owner agreed is unauthorized.
    let mut consented: HashMap<(AgentId, [u8; TEK_LEN], IntervalNumber), IntervalNumber> = HashMap::new();
    for (_, c) in trace.consents() {
        let at = consented.entry((c.phone, c.record.tek, c.record.base_interval)).or_insert(c.record.at);
        *at = (*at).min(c.record.at);
    }
    let times = publication_time(trace);
    for (epoch, publication) in &trace.publications {
        let published = times.get(epoch).copied();
        let at = published
            .map(|(line, _)| record_ref(line, &trace.records[line]))
            .unwrap_or_else(|| format!("epoch {epoch}"));
        for (k, report) in publication.reports.iter().enumerate() {
            let Some(&owner) = owners.get(&(report.tek, report.base_interval)) else { continue };
            match consented.get(&(owner, report.tek, report.base_interval)) {
                None => finding.flag(
                    Verdict::Detected,
                    format!("{at}: report {k} publishes phone {owner}'s key of {} without consent", report.base_interval),
                ),
                Some(&given) if published.is_some_and(|(_, finalized)| given > finalized) => finding.flag(
                    Verdict::Detected,
                    format!("{at}: report {k} publishes phone {owner}'s key of {} before consent at {given}", report.base_interval),
                ),
                Some(_) => {}
            }
        }
    }
    finding.summary = format!("{} publications checked, {} findings", trace.publications.len(), finding.evidence_total);
    Ok(finding)
}

/// Every notification must trace back to a published key whose RPI the
/// second device actually heard within the key's validity.
pub fn check_f_matching(trace: &AuditTrace) -> Result<AuditFinding, AuditError> {
    let mut finding = AuditFinding::new(CheckId::F);
    if trace.notifications().next().is_some() && trace.captures().next().is_none() {
        return Err(AuditError::Inconclusive { check: CheckId::F, reason: "notifications present but no second-device capture".into() });
    }
    let mut heard: HashMap<AgentId, HashMap<[u8; 16], Vec<IntervalNumber>>> = HashMap::new();
    for (_, c) in trace.captures() {
        heard.entry(c.phone).or_default().entry(c.rpi).or_default().push(c.interval);
    }
    let published: BTreeSet<([u8; TEK_LEN], IntervalNumber)> = trace
        .publications
        .values()
        .flat_map(|p: &EpochPublication| p.reports.iter().map(|r| (r.tek, r.base_interval)))
        .collect();

    let mut checked = 0;
    for (i, n) in trace.notifications() {
        checked += 1;
        let here = record_ref(i, &trace.records[i]);
        let cited = (n.notification.tek, n.notification.base_interval);
        if !published.contains(&cited) {
            finding.flag(Verdict::Detected, format!("{here}: phone {} notified for a key that was never published", n.phone));
            continue;
        }
        let Some(tek) = tek_of(cited.0, cited.1) else {
            finding.flag(Verdict::Detected, format!("{here}: cited key has a misaligned base interval"));
            continue;
        };
        let captured = heard.get(&n.phone);
        let matched = rederive_window(&tek).iter().any(|rpi| {
            captured
                .and_then(|m| m.get(&rpi.id))
                .is_some_and(|intervals| intervals.iter().any(|&c| tek.covers(c)))
        });
        if !matched {
            finding.flag(Verdict::Detected, format!("{here}: phone {}'s second device never heard this key", n.phone));
        }
    }
    finding.summary = format!("{checked} notifications checked, {} without a captured match", finding.evidence_total);
    Ok(finding)
}

pub fn run_full_audit(trace: &AuditTrace) -> Result<AuditReport, AuditError> {
    let findings = vec![
        check_a_tek_generation(trace)?,
        check_b_beacon_content(trace)?,
        check_c_metadata(trace)?,
        check_d_reporting(trace)?,
        check_e_stored_reports(trace)?,
        check_f_matching(trace)?,
    ];
    let verdict = findings.iter().map(|f| f.verdict).max().unwrap_or(Verdict::Clean);
    let out_of_scope = BTreeMap::from([
        ("1d".to_owned(), "a platform collecting received beacons leaves nothing on the air or in the ledger".to_owned()),
        ("2a".to_owned(), "agents co-located with a target report with valid endorsements; only their cost rises".to_owned()),
    ]);
    Ok(AuditReport { findings, verdict, out_of_scope })
}
