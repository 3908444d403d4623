use std::collections::HashSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::{AnchorReceipt, SimChain};
use crate::blindsig::Miid;
use crate::keys::TEK_ENCODED_LEN;
use crate::merkle::{EpochBatch, MerkleError};
use crate::registry::Registry;

use super::{EndorsedReport, EpochPublication};

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportRejection {
    #[error("institute {0} has no registered key")]
    UnknownInstitute(Miid),
    #[error("key was already reported")]
    Duplicate,
    #[error("signature does not verify")]
    BadSignature,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("epoch {0} was already finalized")]
    AlreadyFinalized(u32),
    #[error("epoch {requested} requested while epoch {open} is open")]
    EpochMismatch { requested: u32, open: u32 },
    #[error(transparent)]
    Merkle(#[from] MerkleError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerStats {
    pub accepted: u64,
    pub rejected_unknown: u64,
    pub rejected_duplicate: u64,
    pub rejected_signature: u64,
    pub signature_verifications: u64,
    pub digests_computed: u64,
    pub anchor_stores: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinalizedEpoch {
    pub publication: EpochPublication,
    pub receipt: AnchorReceipt,
    pub digest_count: u64,
}

/// Accepts endorsed reports, batches them per epoch, and anchors each
/// non-empty batch exactly once.
#[derive(Debug)]
pub struct LedgerServer {
    open: EpochBatch<Vec<u8>>,
    open_reports: Vec<EndorsedReport>,
    seen: HashSet<[u8; TEK_ENCODED_LEN]>,
    rng: ChaCha20Rng,
    finalized: Vec<FinalizedEpoch>,
    stats: LedgerStats,
}

impl LedgerServer {
    pub fn new(seed: [u8; 32]) -> Self {
        let mut rng = ChaCha20Rng::from_seed(seed);
        let open = EpochBatch::new(0, draw_seed(&mut rng));
        Self {
            open,
            open_reports: Vec::new(),
            seen: HashSet::new(),
            rng,
            finalized: Vec::new(),
            stats: LedgerStats::default(),
        }
    }

    pub fn open_epoch(&self) -> u32 {
        self.open.epoch_id()
    }

    pub fn pending(&self) -> &[EndorsedReport] {
        &self.open_reports
    }

    pub fn stats(&self) -> LedgerStats {
        self.stats
    }

    pub fn finalized(&self) -> &[FinalizedEpoch] {
        &self.finalized
    }

    /// Looks up the institute key, rejects replays, then verifies the signature.
    pub fn accept_report(&mut self, registry: &Registry, report: &EndorsedReport) -> Result<(), ReportRejection> {
        let public = match registry.lookup(report.miid) {
            Ok(public) => public,
            Err(_) => {
                self.stats.rejected_unknown += 1;
                return Err(ReportRejection::UnknownInstitute(report.miid));
            }
        };
        if self.seen.contains(&report.signed_message()) {
            self.stats.rejected_duplicate += 1;
            return Err(ReportRejection::Duplicate);
        }
        self.stats.signature_verifications += 1;
        if !report.verify(&public) {
            self.stats.rejected_signature += 1;
            return Err(ReportRejection::BadSignature);
        }
        self.enqueue(report.clone());
        Ok(())
    }

    /// Queues a report without checking its signature. Only a misbehaving
    /// operator takes this path.
    pub fn insert_unverified(&mut self, report: EndorsedReport) -> Result<(), ReportRejection> {
        if self.seen.contains(&report.signed_message()) {
            return Err(ReportRejection::Duplicate);
        }
        self.enqueue(report);
        Ok(())
    }

    fn enqueue(&mut self, report: EndorsedReport) {
        self.seen.insert(report.signed_message());
        self.open.push(report.encode()).expect("open batch is never finalized");
        self.open_reports.push(report);
        self.stats.accepted += 1;
    }

    /// Closes `epoch_id`, shuffles and hashes its reports, and stores the
    /// root on `chain`. An empty epoch closes without touching the chain.
    pub fn finalize_and_anchor(&mut self, epoch_id: u32, chain: &mut SimChain) -> Result<Option<FinalizedEpoch>, LedgerError> {
        let open = self.open.epoch_id();
        if epoch_id < open {
            return Err(LedgerError::AlreadyFinalized(epoch_id));
        }
        if epoch_id > open {
            return Err(LedgerError::EpochMismatch { requested: epoch_id, open });
        }
        let mut batch = std::mem::replace(&mut self.open, EpochBatch::new(open + 1, draw_seed(&mut self.rng)));
        self.open_reports.clear();
        if batch.pending().is_empty() {
            return Ok(None);
        }
        let (ordered, tree) = batch.finalize()?;
        let reports = ordered
            .iter()
            .map(|bytes| EndorsedReport::decode(bytes).expect("ledger encoded these bytes"))
            .collect();
        let receipt = chain.store(tree.root());
        self.stats.anchor_stores += 1;
        self.stats.digests_computed += tree.digest_count();
        let finalized = FinalizedEpoch {
            publication: EpochPublication {
                epoch_id,
                root: tree.root(),
                anchor_block: receipt.block_number,
                reports,
            },
            receipt,
            digest_count: tree.digest_count(),
        };
        self.finalized.push(finalized.clone());
        Ok(Some(finalized))
    }
}

fn draw_seed(rng: &mut ChaCha20Rng) -> [u8; 32] {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    seed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindsig::InstituteKeyPair;
    use crate::keys::{IntervalNumber, TemporaryExposureKey};
    use crate::protocol::verify_publication;
    use crate::protocol::LedgerTiming;

    struct Fixture {
        key: InstituteKeyPair,
        registry: Registry,
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let key = InstituteKeyPair::generate(&mut rng, 512, Miid::new("LAB").unwrap()).unwrap();
        let mut registry = Registry::new();
        registry
            .register(key.public_key().miid(), &key.public_key().to_bytes(), IntervalNumber::new(0))
            .unwrap();
        Fixture { key, registry }
    }

    fn signed(f: &Fixture, byte: u8) -> EndorsedReport {
        let tek = TemporaryExposureKey::from_published([byte; 16], IntervalNumber::new(144)).unwrap();
        let sig = f.key.sign_plain(&tek.to_bytes()).unwrap();
        EndorsedReport::from_endorsement(&tek, &sig, f.key.public_key())
    }

    #[test]
    fn acceptance_rules() {
        let f = fixture();
        let mut ledger = LedgerServer::new([0u8; 32]);
        let good = signed(&f, 1);
        assert_eq!(ledger.accept_report(&f.registry, &good), Ok(()));
        assert_eq!(ledger.accept_report(&f.registry, &good), Err(ReportRejection::Duplicate));

        let mut forged = signed(&f, 2);
        forged.signature[10] ^= 1;
        assert_eq!(ledger.accept_report(&f.registry, &forged), Err(ReportRejection::BadSignature));

        let mut stranger = signed(&f, 3);
        stranger.miid = Miid::new("NOBODY").unwrap();
        assert_eq!(ledger.accept_report(&f.registry, &stranger), Err(ReportRejection::UnknownInstitute(stranger.miid)));

        let stats = ledger.stats();
        assert_eq!(stats.accepted, 1);
        assert_eq!(stats.signature_verifications, 2);
        assert_eq!((stats.rejected_duplicate, stats.rejected_signature, stats.rejected_unknown), (1, 1, 1));
    }

    #[test]
    fn epochs_anchor_once() {
        let f = fixture();
        let mut chain = SimChain::new();
        let mut ledger = LedgerServer::new([1u8; 32]);
        for b in 0..5 {
            ledger.accept_report(&f.registry, &signed(&f, b)).unwrap();
        }
        chain.advance_block(100).unwrap();
        let epoch = ledger.finalize_and_anchor(0, &mut chain).unwrap().unwrap();
        assert_eq!(epoch.publication.reports.len(), 5);
        assert_eq!(epoch.digest_count, 9);
        assert_eq!(epoch.receipt.block_number, 101);
        assert!(!epoch.receipt.already_stored);
        assert_eq!(chain.store_calls(), 1);
        assert_eq!(ledger.finalize_and_anchor(0, &mut chain), Err(LedgerError::AlreadyFinalized(0)));
        assert_eq!(ledger.finalize_and_anchor(3, &mut chain), Err(LedgerError::EpochMismatch { requested: 3, open: 1 }));

        assert_eq!(ledger.finalize_and_anchor(1, &mut chain), Ok(None));
        assert_eq!(chain.store_calls(), 1);

        let timing = LedgerTiming { genesis: IntervalNumber::new(0), epoch_length: 144, blocks_per_interval: 1 };
        assert_eq!(verify_publication(&epoch.publication, &chain, &timing), Ok(9));
    }

    #[test]
    fn unverified_insertion_skips_the_signature() {
        let f = fixture();
        let mut ledger = LedgerServer::new([2u8; 32]);
        let mut junk = signed(&f, 9);
        junk.signature = vec![0u8; 64];
        assert_eq!(ledger.insert_unverified(junk.clone()), Ok(()));
        assert_eq!(ledger.insert_unverified(junk), Err(ReportRejection::Duplicate));
        assert_eq!(ledger.stats().signature_verifications, 0);
        assert_eq!(ledger.pending().len(), 1);
    }
}
