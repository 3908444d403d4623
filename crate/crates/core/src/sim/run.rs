use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::anchor::SimChain;
use crate::blindsig::{BlindSigError, Miid};
use crate::keys::{DerivedKeys, IntervalNumber, MetadataPlaintext, TemporaryExposureKey, INTERVALS_PER_DAY, TEK_LEN};
use crate::protocol::{
    ActorId, AgentId, BeaconPayload, EndorsedReport, EpochPublication, ExposureNotification, LedgerError, LedgerServer,
    LedgerTiming, MedicalInstitute, MessageFabric, Phone, PhoneConfig, PhoneState, ProtocolError, BEACON_RETENTION,
};
use crate::registry::{Registry, RegistryError};
use crate::trace::{
    create_dir, publication_file_name, write_file, AuditTrace, BeaconTrace, ConsentTrace, NotificationTrace,
    PublicationTrace, RejectionTrace, RunHeader, TekTrace, TraceError, TraceRecord,
};

use super::oracle::{expected_for, planned_reporters, ContactSchedule, NotificationKey};
use super::scenario::{Scenario, ScenarioError, ThreatId, ThreatSpec, ACCOMPLICE_CONTACT_INTERVALS};
use super::sub_seed;

pub const METRICS_FILE: &str = "metrics.json";
pub const SCENARIO_FILE: &str = "scenario.toml";
pub const PHONES_DIR: &str = "phones";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("institute key: {0}")]
    Key(#[from] BlindSigError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatEvent {
    pub threat: ThreatId,
    pub target: AgentId,
    pub fired_at: Option<IntervalNumber>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub agents: u32,
    pub duration: u32,
    pub contact_pair_intervals: usize,
    pub beacons_broadcast: u64,
    pub beacons_delivered: u64,
    pub notifications_issued: usize,
    pub oracle_expected: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub reports_submitted: u64,
    pub reports_rejected: u64,
    pub reports_published: usize,
    pub publications: usize,
    pub digest_counts: Vec<u64>,
    pub signature_verifications: u64,
    pub anchor_stores: u64,
    pub beacons_collected_by_platform: u64,
    pub threat_events: Vec<ThreatEvent>,
    /// Not reproducible; excluded from determinism comparisons.
    pub wall_time_ms: f64,
}

#[derive(Debug)]
pub struct RunOutput {
    pub scenario: Scenario,
    pub metrics: RunMetrics,
    pub trace: AuditTrace,
    pub phones: Vec<PhoneState>,
    pub notifications: BTreeSet<NotificationKey>,
    pub expected: BTreeSet<NotificationKey>,
}

impl RunOutput {
    pub fn publications(&self) -> impl Iterator<Item = &EpochPublication> {
        self.trace.publications.values()
    }

    /// Writes the trace directory plus `metrics.json`, `scenario.toml` and
    /// one state file per phone under `phones/`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), TraceError> {
        create_dir(dir)?;
        self.trace.write_dir(dir)?;
        let metrics = serde_json::to_string_pretty(&self.metrics).expect("metrics serialize");
        write_file(&dir.join(METRICS_FILE), metrics.as_bytes())?;
        write_file(&dir.join(SCENARIO_FILE), self.scenario.to_toml_string().as_bytes())?;
        let phones = dir.join(PHONES_DIR);
        create_dir(&phones)?;
        for state in &self.phones {
            let json = serde_json::to_string(state).expect("phone state serializes");
            write_file(&phones.join(format!("phone-{:04}.json", state.agent)), json.as_bytes())?;
        }
        Ok(())
    }
}

struct ActiveThreat {
    spec: ThreatSpec,
    rng: ChaCha20Rng,
    fired_at: Option<IntervalNumber>,
    active_until: Option<IntervalNumber>,
    detail: String,
}

impl ActiveThreat {
    fn is(&self, threat: ThreatId, target: AgentId) -> bool {
        self.spec.threat == threat && self.spec.target == target
    }
}

fn marker_key(target: AgentId, day: IntervalNumber) -> TemporaryExposureKey {
    let mut hasher = Sha256::new();
    hasher.update(b"marker");
    hasher.update(target.to_le_bytes());
    hasher.update(day.value().to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; TEK_LEN];
    key.copy_from_slice(&digest[..TEK_LEN]);
    TemporaryExposureKey::from_published(key, day).expect("day start is aligned")
}

struct World<'a> {
    scenario: &'a Scenario,
    start: IntervalNumber,
    phones: Vec<Phone>,
    institutes: Vec<MedicalInstitute>,
    transcript_seen: Vec<usize>,
    registry: Registry,
    ledger: LedgerServer,
    chain: SimChain,
    records: Vec<TraceRecord>,
    threats: Vec<ActiveThreat>,
    tek_owner: HashMap<([u8; TEK_LEN], IntervalNumber), AgentId>,
    notifications: BTreeSet<NotificationKey>,
    notification_count: usize,
    reports_submitted: u64,
    reports_rejected: u64,
    beacons_broadcast: u64,
    beacons_delivered: u64,
    collected: u64,
}

impl World<'_> {
    fn tick_phones(&mut self, now: IntervalNumber) {
        for phone in &mut self.phones {
            if let Some(tek) = phone.tick(now) {
                self.tek_owner.insert((*tek.key(), tek.base_interval()), phone.id());
                self.records.push(TraceRecord::Tek(TekTrace {
                    phone: phone.id(),
                    tek: *tek.key(),
                    base_interval: tek.base_interval(),
                    tx_power: phone.config().tx_power,
                }));
            }
        }
    }

    /// What `sender`'s radio emits at `now`, after any platform override.
    fn transmit(&mut self, sender: AgentId, now: IntervalNumber, offset: u32) -> Result<Vec<BeaconPayload>, SimError> {
        let tx_power = self.scenario.tx_power;
        let day = now.day_start();
        let mut substitute = None;
        let mut marked_metadata = false;
        for threat in &mut self.threats {
            if threat.is(ThreatId::MarkerKey, sender) {
                let from = (self.start.value() + threat.spec.at).div_ceil(INTERVALS_PER_DAY) * INTERVALS_PER_DAY;
                if now.value() >= from {
                    substitute = Some(marker_key(sender, day));
                    if threat.fired_at.is_none() {
                        threat.fired_at = Some(now);
                        threat.detail = format!("broadcasting under a platform key from {day}");
                    }
                }
            }
            if threat.is(ThreatId::MetadataMarker, sender) {
                if threat.fired_at.is_none() && offset >= threat.spec.at {
                    threat.fired_at = Some(now);
                    threat.active_until = Some(IntervalNumber::new(day.value() + INTERVALS_PER_DAY));
                    threat.detail = "metadata reserved bytes carry a marker until the end of the day".into();
                }
                marked_metadata |= threat.active_until.is_some_and(|until| now < until);
            }
        }

        let mut payloads = Vec::with_capacity(1);
        if substitute.is_none() && !marked_metadata {
            payloads.push(self.phones[sender as usize].broadcast(now)?);
        } else {
            let tek = match substitute {
                Some(tek) => tek,
                None => self.phones[sender as usize].current_key(now).ok_or(ProtocolError::NoCurrentKey(now))?.clone(),
            };
            let keys = DerivedKeys::new(&tek);
            let mut plaintext = MetadataPlaintext::new(tx_power).to_bytes();
            if marked_metadata {
                plaintext[2..].copy_from_slice(&(sender as u16 | 0x8000).to_be_bytes());
            }
            payloads.push(BeaconPayload {
                rpi: keys.rpi(now).id,
                aem: keys.encrypt_metadata(now, plaintext).ciphertext,
            });
        }

        for threat in &mut self.threats {
            if threat.is(ThreatId::ArbitraryBeacon, sender) && threat.fired_at.is_none() && offset >= threat.spec.at {
                let mut extra = BeaconPayload { rpi: [0u8; 16], aem: [0u8; 4] };
                threat.rng.fill_bytes(&mut extra.rpi);
                threat.rng.fill_bytes(&mut extra.aem);
                threat.fired_at = Some(now);
                threat.detail = format!("extra beacon {}", hex::encode(extra.rpi));
                payloads.push(extra);
            }
        }
        Ok(payloads)
    }

    fn radio_round(&mut self, schedule: &ContactSchedule, fabric: &mut MessageFabric<BeaconPayload>, offset: u32, now: IntervalNumber) -> Result<(), SimError> {
        for (sender, peers) in schedule.neighbours_at(offset) {
            for payload in self.transmit(sender, now, offset)? {
                self.beacons_broadcast += 1;
                self.records.push(TraceRecord::Radio(BeaconTrace { phone: sender, interval: now, rpi: payload.rpi, aem: payload.aem }));
                for &peer in &peers {
                    self.records.push(TraceRecord::Capture(BeaconTrace { phone: peer, interval: now, rpi: payload.rpi, aem: payload.aem }));
                    fabric.send(now, ActorId::Phone(peer), payload);
                }
            }
        }
        for envelope in fabric.drain_due(now) {
            if let ActorId::Phone(agent) = envelope.to {
                self.phones[agent as usize].receive(&envelope.message, now);
                self.beacons_delivered += 1;
                for threat in &mut self.threats {
                    if threat.is(ThreatId::BeaconCollector, agent) && now.value() >= self.start.value() + threat.spec.at {
                        threat.fired_at.get_or_insert(now);
                        self.collected += 1;
                        threat.detail = format!("{} beacons copied off the device", self.collected);
                    }
                }
            }
        }
        Ok(())
    }

    fn flush_transcripts(&mut self) {
        for (i, institute) in self.institutes.iter().enumerate() {
            for entry in &institute.transcript()[self.transcript_seen[i]..] {
                self.records.push(TraceRecord::Transcript(entry.clone()));
            }
            self.transcript_seen[i] = institute.transcript().len();
        }
    }

    fn record_consents(&mut self, agent: AgentId, from: usize) {
        for record in &self.phones[agent as usize].consent_log()[from..] {
            self.records.push(TraceRecord::Consent(ConsentTrace { phone: agent, record: record.clone() }));
        }
    }

    /// Positive test, token, blind endorsement, consent, submission.
    fn report_positive(&mut self, agent: AgentId, institute: usize, now: IntervalNumber) -> Result<usize, SimError> {
        let lab = &mut self.institutes[institute];
        lab.record_positive(agent);
        let token = lab.issue_test_token(agent, now).map_err(ProtocolError::from)?;
        let phone = &mut self.phones[agent as usize];
        let reports = phone.request_endorsements(lab, &self.registry, &token, now)?;
        let consents_before = phone.consent_log().len();
        let results = phone.submit_report(&mut self.ledger, &self.registry, &reports, now);
        self.reports_submitted += results.len() as u64;
        self.reports_rejected += results.iter().filter(|r| r.is_err()).count() as u64;
        self.flush_transcripts();
        self.record_consents(agent, consents_before);
        Ok(results.iter().filter(|r| r.is_ok()).count())
    }

    fn ledger_threats(&mut self, offset: u32, now: IntervalNumber) -> Result<(), SimError> {
        for i in 0..self.threats.len() {
            let spec = self.threats[i].spec.clone();
            match spec.threat {
                ThreatId::SignedAgent if offset == spec.at + ACCOMPLICE_CONTACT_INTERVALS => {
                    let accomplice = spec.accomplice.expect("validated");
                    let accepted = self.report_positive(accomplice, 0, now)?;
                    let threat = &mut self.threats[i];
                    threat.fired_at = Some(now);
                    threat.detail = format!("agent {accomplice} reported {accepted} endorsed keys after meeting the target");
                }
                ThreatId::UnsignedAgent if offset == spec.at + ACCOMPLICE_CONTACT_INTERVALS => {
                    let accomplice = spec.accomplice.expect("validated");
                    let public = self.institutes[0].public_key().clone();
                    let keys: Vec<TemporaryExposureKey> = self.phones[accomplice as usize]
                        .key_ring()
                        .entries()
                        .iter()
                        .filter(|k| k.base_interval() <= now)
                        .cloned()
                        .collect();
                    let threat = &mut self.threats[i];
                    let reports: Vec<EndorsedReport> = keys
                        .iter()
                        .map(|tek| {
                            let mut signature = vec![0u8; public.modulus_len()];
                            threat.rng.fill_bytes(&mut signature);
                            EndorsedReport::new(tek, public.miid(), signature)
                        })
                        .collect();
                    let phone = &mut self.phones[accomplice as usize];
                    let before = phone.consent_log().len();
                    phone.record_consent(&reports, now);
                    self.record_consents(accomplice, before);
                    let inserted = reports.into_iter().filter(|r| self.ledger.insert_unverified(r.clone()).is_ok()).count();
                    let threat = &mut self.threats[i];
                    threat.fired_at = Some(now);
                    threat.detail = format!("ledger queued {inserted} unsigned reports from agent {accomplice}");
                }
                ThreatId::FakeReport if offset == spec.at => {
                    let Some(tek) = self.phones[spec.target as usize].current_key(now).cloned() else { continue };
                    let lab = &self.institutes[0];
                    let endorsement = lab.key_pair().sign_plain(&tek.to_bytes())?;
                    let report = EndorsedReport::from_endorsement(&tek, &endorsement, lab.public_key());
                    let outcome = self.ledger.accept_report(&self.registry, &report);
                    let threat = &mut self.threats[i];
                    threat.fired_at = Some(now);
                    threat.detail = match outcome {
                        Ok(()) => format!("institute endorsed and submitted the key of {}", tek.base_interval()),
                        Err(e) => format!("submission refused: {e}"),
                    };
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn close_epoch(&mut self, epoch: u32, next: IntervalNumber, publications: &mut Vec<EpochPublication>, digest_counts: &mut Vec<u64>) -> Result<(), SimError> {
        if let Some(done) = self.ledger.finalize_and_anchor(epoch, &mut self.chain)? {
            self.records.push(TraceRecord::Publication(PublicationTrace {
                epoch_id: epoch,
                file: publication_file_name(epoch),
                root: done.publication.root,
                anchor_block: done.receipt.block_number,
                already_stored: done.receipt.already_stored,
                finalized_at: next,
                report_count: done.publication.reports.len(),
                digest_count: done.digest_count,
            }));
            digest_counts.push(done.digest_count);
            publications.push(done.publication);
        }
        Ok(())
    }

    fn download_round(&mut self, publications: &[EpochPublication], timing: &LedgerTiming, now: IntervalNumber) {
        for phone in &mut self.phones {
            let outcome = phone.download_and_match(publications, &self.chain, timing, now);
            for (epoch_id, rejection) in outcome.rejected {
                self.records.push(TraceRecord::Rejection(RejectionTrace {
                    phone: phone.id(),
                    epoch_id,
                    reason: rejection.to_string(),
                    at: now,
                }));
            }
            for notification in outcome.notifications {
                self.notification_count += 1;
                if let Some(&reporter) = self.tek_owner.get(&(notification.tek, notification.base_interval)) {
                    self.notifications.insert(NotificationKey {
                        agent: phone.id(),
                        reporter,
                        base_interval: notification.base_interval,
                    });
                }
                self.records.push(TraceRecord::Notification(NotificationTrace { phone: phone.id(), notification }));
            }
        }

        let last_epoch = publications.last().map_or(0, |p| p.epoch_id);
        for threat in &mut self.threats {
            if threat.spec.threat != ThreatId::FalseNotification || threat.fired_at.is_some() {
                continue;
            }
            if now.value() < self.start.value() + threat.spec.at {
                continue;
            }
            let mut tek = [0u8; TEK_LEN];
            threat.rng.fill_bytes(&mut tek);
            let notification = ExposureNotification {
                epoch_id: last_epoch,
                tek,
                base_interval: now.saturating_sub(1).day_start(),
                miid: self.institutes[0].miid(),
                matched_intervals: Vec::new(),
                issued_at: now,
            };
            self.phones[threat.spec.target as usize].push_platform_notification(notification.clone());
            self.records.push(TraceRecord::Notification(NotificationTrace { phone: threat.spec.target, notification }));
            threat.fired_at = Some(now);
            threat.detail = format!("notification for unpublished key {}", hex::encode(tek));
        }
    }
}

/// Runs `scenario` on the virtual clock. Identical scenarios produce
/// identical traces, publications and metrics apart from wall time.
pub fn run(scenario: &Scenario) -> Result<RunOutput, SimError> {
    scenario.validate()?;
    let started = Instant::now();
    let seed = scenario.seed;
    let start = scenario.start();
    let timing = LedgerTiming {
        genesis: start,
        epoch_length: scenario.epoch_length,
        blocks_per_interval: scenario.blocks_per_interval,
    };
    let schedule = ContactSchedule::generate(scenario);

    let mut registry = Registry::new();
    let mut institutes = Vec::with_capacity(scenario.institutes as usize);
    for i in 0..scenario.institutes {
        let mut rng = ChaCha20Rng::from_seed(sub_seed(seed, "institute", u64::from(i)));
        let miid = Miid::new(&format!("INST-{i:03}"))?;
        let lab = MedicalInstitute::generate(&mut rng, scenario.key_bits, miid, scenario.token_validity)?;
        registry.register(miid, &lab.public_key().to_bytes(), start)?;
        institutes.push(lab);
    }

    let config = PhoneConfig {
        match_threshold: scenario.match_threshold,
        tx_power: scenario.tx_power,
        retention: BEACON_RETENTION,
    };
    let phones = (0..scenario.agents)
        .map(|a| Phone::new(a, config, sub_seed(seed, "phone", u64::from(a))))
        .collect();
    let threats = scenario
        .threats
        .iter()
        .enumerate()
        .map(|(i, spec)| ActiveThreat {
            spec: spec.clone(),
            rng: ChaCha20Rng::from_seed(sub_seed(seed, "threat", i as u64)),
            fired_at: None,
            active_until: None,
            detail: String::new(),
        })
        .collect();

    let header = RunHeader {
        seed,
        agents: scenario.agents,
        duration: scenario.duration,
        timing,
        match_threshold: scenario.match_threshold,
        institutes: institutes.iter().map(|lab| lab.miid()).collect(),
    };
    let mut world = World {
        scenario,
        start,
        phones,
        transcript_seen: vec![0; institutes.len()],
        institutes,
        registry,
        ledger: LedgerServer::new(sub_seed(seed, "ledger", 0)),
        chain: SimChain::new(),
        records: vec![TraceRecord::Run(header)],
        threats,
        tek_owner: HashMap::new(),
        notifications: BTreeSet::new(),
        notification_count: 0,
        reports_submitted: 0,
        reports_rejected: 0,
        beacons_broadcast: 0,
        beacons_delivered: 0,
        collected: 0,
    };
    let mut fabric = MessageFabric::new(scenario.beacon_loss, sub_seed(seed, "fabric", 0));

    let mut tests: BTreeMap<u32, Vec<(AgentId, usize)>> = BTreeMap::new();
    for (agent, test_at, institute) in planned_reporters(scenario) {
        tests.entry(test_at).or_default().push((agent, institute as usize));
    }

    let mut publications: Vec<EpochPublication> = Vec::new();
    let mut digest_counts = Vec::new();
    for offset in 0..scenario.duration {
        let now = IntervalNumber::new(start.value() + offset);
        if now.is_day_aligned() {
            world.tick_phones(now);
        }
        world.radio_round(&schedule, &mut fabric, offset, now)?;
        for &(agent, institute) in tests.get(&offset).into_iter().flatten() {
            world.report_positive(agent, institute, now)?;
        }
        world.ledger_threats(offset, now)?;

        if (offset + 1) % scenario.epoch_length == 0 {
            let epoch = (offset + 1) / scenario.epoch_length - 1;
            let next = IntervalNumber::new(now.value() + 1);
            world.close_epoch(epoch, next, &mut publications, &mut digest_counts)?;
            if (epoch + 1).is_multiple_of(scenario.download_every) {
                world.download_round(&publications, &timing, next);
            }
        }
        world.chain.advance_block(scenario.blocks_per_interval).expect("positive block step");
    }

    let end = IntervalNumber::new(start.value() + scenario.duration);
    let expected = expected_for(scenario);
    let true_positives = world.notifications.intersection(&expected).count();
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let stats = world.ledger.stats();
    let metrics = RunMetrics {
        seed,
        agents: scenario.agents,
        duration: scenario.duration,
        contact_pair_intervals: schedule.pair_intervals(),
        beacons_broadcast: world.beacons_broadcast,
        beacons_delivered: world.beacons_delivered,
        notifications_issued: world.notification_count,
        oracle_expected: expected.len(),
        true_positives,
        precision: ratio(true_positives, world.notifications.len()),
        recall: ratio(true_positives, expected.len()),
        reports_submitted: world.reports_submitted,
        reports_rejected: world.reports_rejected,
        reports_published: publications.iter().map(|p| p.reports.len()).sum(),
        publications: publications.len(),
        digest_counts,
        signature_verifications: stats.signature_verifications,
        anchor_stores: stats.anchor_stores,
        beacons_collected_by_platform: world.collected,
        threat_events: world
            .threats
            .iter()
            .map(|t| ThreatEvent { threat: t.spec.threat, target: t.spec.target, fired_at: t.fired_at, detail: t.detail.clone() })
            .collect(),
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    let trace = AuditTrace {
        records: world.records,
        publications: publications.into_iter().map(|p| (p.epoch_id, p)).collect(),
        chain: world.chain.export(),
        registry: world.registry,
    };
    Ok(RunOutput {
        scenario: scenario.clone(),
        metrics,
        trace,
        phones: world.phones.iter().map(|p| p.state(end)).collect(),
        notifications: world.notifications,
        expected,
    })
}
