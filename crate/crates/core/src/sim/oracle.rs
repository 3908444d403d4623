//! Ground-truth contacts and the notifications they imply, computed from the
//! scenario alone without any protocol cryptography.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::keys::{IntervalNumber, INTERVALS_PER_DAY, KEY_RING_CAPACITY};
use crate::protocol::{AgentId, BEACON_RETENTION};

use super::scenario::{Scenario, ACCOMPLICE_CONTACT_INTERVALS};
use super::sub_seed;

/// Co-located pairs per interval offset. Pairs are stored as `(low, high)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContactSchedule {
    pairs: BTreeMap<u32, BTreeSet<(AgentId, AgentId)>>,
}

impl ContactSchedule {
    pub fn generate(scenario: &Scenario) -> Self {
        let mut schedule = Self::default();
        for c in &scenario.contacts {
            schedule.add_group(&c.agents, c.at, c.duration, scenario.duration);
        }
        if let Some(m) = &scenario.mobility {
            let mut rng = ChaCha20Rng::from_seed(sub_seed(scenario.seed, "mobility", 0));
            let days = scenario.duration.div_ceil(INTERVALS_PER_DAY);
            for day in 0..days {
                for _ in 0..m.meetings_per_day {
                    let size = rng.gen_range(2..=m.max_group_size);
                    let members: Vec<AgentId> = sample(&mut rng, scenario.agents as usize, size as usize)
                        .into_iter()
                        .map(|a| a as AgentId)
                        .collect();
                    let start = day * INTERVALS_PER_DAY + rng.gen_range(0..INTERVALS_PER_DAY);
                    let length = rng.gen_range(1..=m.max_meeting_intervals);
                    schedule.add_group(&members, start, length, scenario.duration);
                }
            }
        }
        for t in &scenario.threats {
            if let (true, Some(accomplice)) = (t.threat.needs_accomplice(), t.accomplice) {
                schedule.add_group(&[t.target, accomplice], t.at, ACCOMPLICE_CONTACT_INTERVALS, scenario.duration);
            }
        }
        schedule
    }

    fn add_group(&mut self, members: &[AgentId], at: u32, duration: u32, horizon: u32) {
        let end = at.saturating_add(duration).min(horizon);
        for offset in at..end {
            let slot = self.pairs.entry(offset).or_default();
            for (i, &a) in members.iter().enumerate() {
                for &b in &members[i + 1..] {
                    if a != b {
                        slot.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }

    pub fn pairs_at(&self, offset: u32) -> impl Iterator<Item = (AgentId, AgentId)> + '_ {
        self.pairs.get(&offset).into_iter().flatten().copied()
    }

    /// Each agent's co-located peers at `offset`.
    pub fn neighbours_at(&self, offset: u32) -> BTreeMap<AgentId, BTreeSet<AgentId>> {
        let mut out: BTreeMap<AgentId, BTreeSet<AgentId>> = BTreeMap::new();
        for (a, b) in self.pairs_at(offset) {
            out.entry(a).or_default().insert(b);
            out.entry(b).or_default().insert(a);
        }
        out
    }

    pub fn pair_intervals(&self) -> usize {
        self.pairs.values().map(BTreeSet::len).sum()
    }
}

/// Ground-truth `(a, b, interval)` co-location triples with `a < b`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContactOracle {
    triples: BTreeSet<(AgentId, AgentId, IntervalNumber)>,
}

impl ContactOracle {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        let schedule = ContactSchedule::generate(scenario);
        let start = scenario.start_interval;
        let triples = schedule
            .pairs
            .iter()
            .flat_map(|(&offset, pairs)| pairs.iter().map(move |&(a, b)| (a, b, IntervalNumber::new(start + offset))))
            .collect();
        Self { triples }
    }

    pub fn triples(&self) -> &BTreeSet<(AgentId, AgentId, IntervalNumber)> {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// One published key window of a reporter and when phones fetch it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReportedWindow {
    pub reporter: AgentId,
    pub base_interval: IntervalNumber,
    pub download_at: IntervalNumber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NotificationKey {
    pub agent: AgentId,
    pub reporter: AgentId,
    pub base_interval: IntervalNumber,
}

/// First download at or after the close of the epoch containing `offset`,
/// if it happens before the run ends.
pub fn download_offset(scenario: &Scenario, offset: u32) -> Option<u32> {
    let epoch = offset / scenario.epoch_length;
    let cadence = scenario.download_every;
    let download_epoch = (epoch + 1).div_ceil(cadence) * cadence;
    let at = download_epoch.checked_mul(scenario.epoch_length)?;
    (at <= scenario.duration).then_some(at)
}

/// Windows each reporter's phone publishes: one per day from the later of
/// the run start and 13 days before the test, through the test day.
pub fn reported_windows(scenario: &Scenario, reporters: &[(AgentId, u32)]) -> Vec<ReportedWindow> {
    let start = scenario.start_interval;
    let mut out = Vec::new();
    for &(reporter, test_at) in reporters {
        let Some(download) = download_offset(scenario, test_at) else { continue };
        let test_day = (start + test_at) / INTERVALS_PER_DAY;
        let first_day = (start / INTERVALS_PER_DAY).max(test_day.saturating_sub(KEY_RING_CAPACITY as u32 - 1));
        for day in first_day..=test_day {
            out.push(ReportedWindow {
                reporter,
                base_interval: IntervalNumber::new(day * INTERVALS_PER_DAY),
                download_at: IntervalNumber::new(start + download),
            });
        }
    }
    out.sort();
    out
}

/// Agents with at least `threshold` co-location intervals with the reporter
/// inside a published key's validity and still retained at download time.
pub fn oracle_expected_notifications(
    oracle: &ContactOracle,
    windows: &[ReportedWindow],
    threshold: usize,
) -> BTreeSet<NotificationKey> {
    let mut expected = BTreeSet::new();
    for w in windows {
        let base = w.base_interval.value();
        let download = w.download_at.value();
        let mut shared: BTreeMap<AgentId, BTreeSet<u32>> = BTreeMap::new();
        for &(a, b, interval) in oracle.triples() {
            let c = interval.value();
            let inside_key = c >= base && c < base + INTERVALS_PER_DAY;
            let retained = c < download && download - c < BEACON_RETENTION;
            if !(inside_key && retained) {
                continue;
            }
            let other = if a == w.reporter {
                b
            } else if b == w.reporter {
                a
            } else {
                continue;
            };
            shared.entry(other).or_default().insert(c);
        }
        for (agent, intervals) in shared {
            if intervals.len() >= threshold {
                expected.insert(NotificationKey { agent, reporter: w.reporter, base_interval: w.base_interval });
            }
        }
    }
    expected
}

/// Reporters named in the scenario plus the seeded random ones, as `(agent, test offset, institute)`.
pub fn planned_reporters(scenario: &Scenario) -> Vec<(AgentId, u32, u32)> {
    let mut out: Vec<(AgentId, u32, u32)> = scenario.reporters.iter().map(|r| (r.agent, r.test_at, r.institute)).collect();
    if scenario.random_reporters > 0 {
        let named: BTreeSet<AgentId> = out.iter().map(|r| r.0).collect();
        let pool: Vec<AgentId> = (0..scenario.agents).filter(|a| !named.contains(a)).collect();
        let mut rng = ChaCha20Rng::from_seed(sub_seed(scenario.seed, "reporters", 0));
        for i in sample(&mut rng, pool.len(), scenario.random_reporters as usize) {
            let test_at = rng.gen_range(0..scenario.duration);
            let institute = rng.gen_range(0..scenario.institutes);
            out.push((pool[i], test_at, institute));
        }
    }
    out
}

/// The full expected set for an honest run of `scenario`.
pub fn expected_for(scenario: &Scenario) -> BTreeSet<NotificationKey> {
    let oracle = ContactOracle::from_scenario(scenario);
    let reporters: Vec<(AgentId, u32)> = planned_reporters(scenario).iter().map(|&(a, t, _)| (a, t)).collect();
    oracle_expected_notifications(&oracle, &reported_windows(scenario, &reporters), scenario.match_threshold)
}
