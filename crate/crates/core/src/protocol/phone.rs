use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::SimChain;
use crate::blindsig::{blind, unblind, Miid};
use crate::keys::{
    DerivedKeys, IntervalNumber, KeyRing, MetadataPlaintext, TemporaryExposureKey, INTERVALS_PER_DAY, KEY_RING_CAPACITY,
    TEK_LEN,
};
use crate::registry::Registry;

use super::{
    verify_publication, AgentId, EndorsedReport, EpochPublication, LedgerServer, LedgerTiming, MedicalInstitute,
    ProtocolError, PublicationRejection, ReportRejection, TestToken,
};

/// Received beacons older than 14 days are discarded.
pub const BEACON_RETENTION: u32 = INTERVALS_PER_DAY * KEY_RING_CAPACITY as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BeaconPayload {
    #[serde(with = "crate::hexser::array")]
    pub rpi: [u8; 16],
    #[serde(with = "crate::hexser::array")]
    pub aem: [u8; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredBeacon {
    #[serde(with = "crate::hexser::array")]
    pub rpi: [u8; 16],
    #[serde(with = "crate::hexser::array")]
    pub aem: [u8; 4],
    pub interval: IntervalNumber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneConfig {
    /// Distinct matching intervals needed before a report triggers a notification.
    pub match_threshold: usize,
    pub tx_power: i8,
    pub retention: u32,
}

impl Default for PhoneConfig {
    fn default() -> Self {
        Self {
            match_threshold: 1,
            tx_power: -8,
            retention: BEACON_RETENTION,
        }
    }
}

/// Application-side record of each key the phone generated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TekLogEntry {
    #[serde(with = "crate::hexser::array")]
    pub tek: [u8; TEK_LEN],
    pub base_interval: IntervalNumber,
    pub tx_power: i8,
}

/// The user agreed to publish this key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRecord {
    #[serde(with = "crate::hexser::array")]
    pub tek: [u8; TEK_LEN],
    pub base_interval: IntervalNumber,
    pub miid: Miid,
    pub at: IntervalNumber,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureNotification {
    pub epoch_id: u32,
    #[serde(with = "crate::hexser::array")]
    pub tek: [u8; TEK_LEN],
    pub base_interval: IntervalNumber,
    pub miid: Miid,
    pub matched_intervals: Vec<IntervalNumber>,
    pub issued_at: IntervalNumber,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DownloadOutcome {
    pub notifications: Vec<ExposureNotification>,
    pub rejected: Vec<(u32, PublicationRejection)>,
    pub checked: Vec<u32>,
}

/// Everything a phone needs to re-run matching offline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneState {
    pub agent: AgentId,
    pub config: PhoneConfig,
    pub saved_at: IntervalNumber,
    pub last_download_epoch: Option<u32>,
    pub beacons: Vec<StoredBeacon>,
    pub exposure_log: Vec<ExposureNotification>,
}

#[derive(Debug)]
pub struct Phone {
    id: AgentId,
    config: PhoneConfig,
    rng: ChaCha20Rng,
    ring: KeyRing,
    current: Option<(TemporaryExposureKey, DerivedKeys)>,
    beacons: BTreeMap<(IntervalNumber, [u8; 16]), [u8; 4]>,
    tek_log: Vec<TekLogEntry>,
    consent_log: Vec<ConsentRecord>,
    exposure_log: Vec<ExposureNotification>,
    last_download_epoch: Option<u32>,
}

impl Phone {
    pub fn new(id: AgentId, config: PhoneConfig, seed: [u8; 32]) -> Self {
        Self {
            id,
            config,
            rng: ChaCha20Rng::from_seed(seed),
            ring: KeyRing::new(),
            current: None,
            beacons: BTreeMap::new(),
            tek_log: Vec::new(),
            consent_log: Vec::new(),
            exposure_log: Vec::new(),
            last_download_epoch: None,
        }
    }

    /// A receive-and-match-only phone rebuilt from saved state. It holds no keys.
    pub fn from_state(state: &PhoneState) -> Self {
        let mut phone = Self::new(state.agent, state.config, [0u8; 32]);
        phone.last_download_epoch = state.last_download_epoch;
        phone.exposure_log = state.exposure_log.clone();
        for b in &state.beacons {
            phone.beacons.insert((b.interval, b.rpi), b.aem);
        }
        phone
    }

    pub fn state(&self, saved_at: IntervalNumber) -> PhoneState {
        PhoneState {
            agent: self.id,
            config: self.config,
            saved_at,
            last_download_epoch: self.last_download_epoch,
            beacons: self.beacons().collect(),
            exposure_log: self.exposure_log.clone(),
        }
    }

    pub fn id(&self) -> AgentId {
        self.id
    }

    pub fn config(&self) -> &PhoneConfig {
        &self.config
    }

    pub fn key_ring(&self) -> &KeyRing {
        &self.ring
    }

    pub fn beacons(&self) -> impl Iterator<Item = StoredBeacon> + '_ {
        self.beacons
            .iter()
            .map(|(&(interval, rpi), &aem)| StoredBeacon { rpi, aem, interval })
    }

    pub fn beacon_count(&self) -> usize {
        self.beacons.len()
    }

    pub fn tek_log(&self) -> &[TekLogEntry] {
        &self.tek_log
    }

    pub fn consent_log(&self) -> &[ConsentRecord] {
        &self.consent_log
    }

    pub fn exposure_log(&self) -> &[ExposureNotification] {
        &self.exposure_log
    }

    pub fn last_download_epoch(&self) -> Option<u32> {
        self.last_download_epoch
    }

    /// Rolls the key ring to the day of `now` and drops expired beacons.
    /// Returns the newly generated key, if a new day began.
    pub fn tick(&mut self, now: IntervalNumber) -> Option<TemporaryExposureKey> {
        self.evict(now);
        let fresh = self.ring.advance(now, &mut self.rng).cloned()?;
        self.tek_log.push(TekLogEntry {
            tek: *fresh.key(),
            base_interval: fresh.base_interval(),
            tx_power: self.config.tx_power,
        });
        self.current = Some((fresh.clone(), DerivedKeys::new(&fresh)));
        Some(fresh)
    }

    pub fn current_key(&self, now: IntervalNumber) -> Option<&TemporaryExposureKey> {
        self.ring.current(now)
    }

    /// RPI and encrypted metadata for `now` under the current key.
    pub fn broadcast(&mut self, now: IntervalNumber) -> Result<BeaconPayload, ProtocolError> {
        let tek = self.ring.current(now).ok_or(ProtocolError::NoCurrentKey(now))?;
        if self.current.as_ref().map(|(k, _)| k) != Some(tek) {
            self.current = Some((tek.clone(), DerivedKeys::new(tek)));
        }
        let (_, keys) = self.current.as_ref().expect("set above");
        let rpi = keys.rpi(now);
        let aem = keys.encrypt_metadata(now, MetadataPlaintext::new(self.config.tx_power).to_bytes());
        Ok(BeaconPayload { rpi: rpi.id, aem: aem.ciphertext })
    }

    /// Stores a beacon heard at `now`. Returns false for a repeat.
    pub fn receive(&mut self, payload: &BeaconPayload, now: IntervalNumber) -> bool {
        self.beacons.insert((now, payload.rpi), payload.aem).is_none()
    }

    /// Drops every beacon with `now - captured >= retention`.
    pub fn evict(&mut self, now: IntervalNumber) {
        let cutoff = now.value().saturating_sub(self.config.retention.saturating_sub(1));
        if cutoff == 0 {
            return;
        }
        self.beacons = self.beacons.split_off(&(IntervalNumber::new(cutoff), [0u8; 16]));
    }

    /// Blinds every key up to `now`, has them signed against `token`, and
    /// unblinds the results. Every unblinded signature is checked against the
    /// registry key before it is returned.
    pub fn request_endorsements(
        &mut self,
        institute: &mut MedicalInstitute,
        registry: &Registry,
        token: &TestToken,
        now: IntervalNumber,
    ) -> Result<Vec<EndorsedReport>, ProtocolError> {
        let public = registry
            .lookup(token.miid)
            .map_err(|_| ProtocolError::UnknownInstitute(token.miid))?;
        let keys: Vec<TemporaryExposureKey> = self
            .ring
            .entries()
            .iter()
            .filter(|tek| tek.base_interval() <= now)
            .cloned()
            .collect();
        let mut blinded = Vec::with_capacity(keys.len());
        let mut factors = Vec::with_capacity(keys.len());
        for tek in &keys {
            let (b, r) = blind(&tek.to_bytes(), &public, &mut self.rng)?;
            blinded.push(b);
            factors.push(r);
        }
        let signatures = institute.endorse(token, &blinded, now)?;
        let mut reports = Vec::with_capacity(keys.len());
        for ((tek, sig), factor) in keys.iter().zip(&signatures).zip(&factors) {
            let endorsement = unblind(sig, factor, &public)?;
            let report = EndorsedReport::from_endorsement(tek, &endorsement, &public);
            if !report.verify(&public) {
                return Err(ProtocolError::InvalidEndorsement);
            }
            reports.push(report);
        }
        Ok(reports)
    }

    pub fn record_consent(&mut self, reports: &[EndorsedReport], now: IntervalNumber) {
        for report in reports {
            self.consent_log.push(ConsentRecord {
                tek: report.tek,
                base_interval: report.base_interval,
                miid: report.miid,
                at: now,
            });
        }
    }

    /// Logs consent for `reports` and hands each to the ledger.
    pub fn submit_report(
        &mut self,
        ledger: &mut LedgerServer,
        registry: &Registry,
        reports: &[EndorsedReport],
        now: IntervalNumber,
    ) -> Vec<Result<(), ReportRejection>> {
        self.record_consent(reports, now);
        reports.iter().map(|r| ledger.accept_report(registry, r)).collect()
    }

    /// Verifies each publication newer than the last download against the
    /// chain, then matches its reports against the stored beacons.
    pub fn download_and_match(
        &mut self,
        publications: &[EpochPublication],
        chain: &SimChain,
        timing: &LedgerTiming,
        now: IntervalNumber,
    ) -> DownloadOutcome {
        self.evict(now);
        let mut index: HashMap<[u8; 16], Vec<IntervalNumber>> = HashMap::new();
        for &(interval, rpi) in self.beacons.keys() {
            index.entry(rpi).or_default().push(interval);
        }

        let mut outcome = DownloadOutcome::default();
        let mut fresh: Vec<&EpochPublication> = publications
            .iter()
            .filter(|p| self.last_download_epoch.is_none_or(|last| p.epoch_id > last))
            .collect();
        fresh.sort_by_key(|p| p.epoch_id);
        for publication in fresh {
            outcome.checked.push(publication.epoch_id);
            self.last_download_epoch = Some(publication.epoch_id);
            if let Err(rejection) = verify_publication(publication, chain, timing) {
                outcome.rejected.push((publication.epoch_id, rejection));
                continue;
            }
            if index.is_empty() {
                continue;
            }
            for report in &publication.reports {
                let Ok(tek) = report.temporary_exposure_key() else { continue };
                let matched = match_report(&tek, &index);
                if matched.len() >= self.config.match_threshold.max(1) {
                    let notification = ExposureNotification {
                        epoch_id: publication.epoch_id,
                        tek: report.tek,
                        base_interval: report.base_interval,
                        miid: report.miid,
                        matched_intervals: matched.into_iter().collect(),
                        issued_at: now,
                    };
                    self.exposure_log.push(notification.clone());
                    outcome.notifications.push(notification);
                }
            }
        }
        outcome
    }

    /// Appends a notification that did not come from the matching path, as a
    /// platform layer in control of the display could.
    pub fn push_platform_notification(&mut self, notification: ExposureNotification) {
        self.exposure_log.push(notification);
    }
}

/// Distinct capture intervals inside the key's validity whose beacon carries
/// one of the key's RPIs.
fn match_report(tek: &TemporaryExposureKey, index: &HashMap<[u8; 16], Vec<IntervalNumber>>) -> BTreeSet<IntervalNumber> {
    let keys = DerivedKeys::new(tek);
    let mut matched = BTreeSet::new();
    for rpi in keys.window() {
        if let Some(intervals) = index.get(&rpi.id) {
            matched.extend(intervals.iter().copied().filter(|&c| tek.covers(c)));
        }
    }
    matched
}
