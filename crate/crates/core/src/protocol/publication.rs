//! Per-epoch publication file.
//!
//! ```text
//! epoch_id (u32 LE) || count (u32 LE) || root (32) || anchor_block (u64 LE) || report*
//! ```
//!
//! Reports appear in Merkle leaf order, each in the endorsed report wire format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::SimChain;
use crate::keys::IntervalNumber;
use crate::merkle::{build_root, Digest, DIGEST_LEN};

use super::{EndorsedReport, ProtocolError};

const HEADER_LEN: usize = 4 + 4 + DIGEST_LEN + 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPublication {
    pub epoch_id: u32,
    pub root: Digest,
    pub anchor_block: u64,
    pub reports: Vec<EndorsedReport>,
}

impl EpochPublication {
    pub fn encoded_reports(&self) -> Vec<Vec<u8>> {
        self.reports.iter().map(EndorsedReport::encode).collect()
    }

    /// Root over the reports as listed, plus the number of digests computed.
    pub fn recompute_root(&self) -> Result<(Digest, u64), ProtocolError> {
        Ok(build_root(&self.encoded_reports())?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.reports.iter().map(|r| r.encoded_len()).sum::<usize>());
        out.extend_from_slice(&self.epoch_id.to_le_bytes());
        out.extend_from_slice(&(self.reports.len() as u32).to_le_bytes());
        out.extend_from_slice(self.root.as_bytes());
        out.extend_from_slice(&self.anchor_block.to_le_bytes());
        for report in &self.reports {
            out.extend_from_slice(&report.encode());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() < HEADER_LEN {
            return Err(ProtocolError::Truncated { needed: HEADER_LEN, available: bytes.len() });
        }
        let epoch_id = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
        let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let root = Digest::from_slice(&bytes[8..8 + DIGEST_LEN]).expect("32 bytes");
        let anchor_block = u64::from_le_bytes(bytes[8 + DIGEST_LEN..HEADER_LEN].try_into().expect("8 bytes"));
        let mut rest = &bytes[HEADER_LEN..];
        let mut reports = Vec::with_capacity(count.min(rest.len() / 32));
        for _ in 0..count {
            let (report, used) = EndorsedReport::decode_prefix(rest)?;
            reports.push(report);
            rest = &rest[used..];
        }
        if !rest.is_empty() {
            return Err(ProtocolError::TrailingBytes(rest.len()));
        }
        Ok(Self { epoch_id, root, anchor_block, reports })
    }
}

/// Maps simulation time onto epochs and chain blocks. Epoch `e` covers
/// intervals `[genesis + e*L, genesis + (e+1)*L)` and, on a chain that starts
/// at block 1 and advances `blocks_per_interval` per interval, blocks
/// `[1 + e*L*bpi, (e+1)*L*bpi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTiming {
    pub genesis: IntervalNumber,
    pub epoch_length: u32,
    pub blocks_per_interval: u64,
}

impl LedgerTiming {
    pub fn blocks_per_epoch(&self) -> u64 {
        u64::from(self.epoch_length) * self.blocks_per_interval
    }

    pub fn epoch_of(&self, t: IntervalNumber) -> u32 {
        (t.value() - self.genesis.value()) / self.epoch_length
    }

    /// First interval after epoch `epoch` closes.
    pub fn epoch_end(&self, epoch: u32) -> IntervalNumber {
        IntervalNumber::new(self.genesis.value() + (epoch + 1) * self.epoch_length)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PublicationRejection {
    #[error("root {computed} recomputed from the reports differs from the published {claimed}")]
    RootMismatch { claimed: Digest, computed: Digest },
    #[error("root {0} is not anchored")]
    NotAnchored(Digest),
    #[error("publication claims anchor block {claimed}, chain has {stored}")]
    AnchorBlockMismatch { claimed: u64, stored: u64 },
    #[error("anchor block {block} is outside the plausible range for epoch {epoch}")]
    Implausible { block: u64, epoch: u32 },
    #[error("malformed publication: {0}")]
    Malformed(String),
}

/// Recomputes the root, then checks it is anchored at the claimed block
/// inside the epoch's plausibility window.
pub fn verify_publication(
    publication: &EpochPublication,
    chain: &SimChain,
    timing: &LedgerTiming,
) -> Result<u64, PublicationRejection> {
    let (computed, digests) = publication
        .recompute_root()
        .map_err(|e| PublicationRejection::Malformed(e.to_string()))?;
    if computed != publication.root {
        return Err(PublicationRejection::RootMismatch { claimed: publication.root, computed });
    }
    let stored = chain.get_stored(&computed);
    if stored == 0 {
        return Err(PublicationRejection::NotAnchored(computed));
    }
    if stored != publication.anchor_block {
        return Err(PublicationRejection::AnchorBlockMismatch { claimed: publication.anchor_block, stored });
    }
    let plausible = chain
        .plausibility_window(&computed, u64::from(publication.epoch_id), timing.blocks_per_epoch())
        .map_err(|e| PublicationRejection::Malformed(e.to_string()))?;
    if !plausible {
        return Err(PublicationRejection::Implausible { block: stored, epoch: publication.epoch_id });
    }
    Ok(digests)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindsig::Miid;
    use crate::keys::TemporaryExposureKey;

    fn report(byte: u8) -> EndorsedReport {
        let tek = TemporaryExposureKey::from_published([byte; 16], IntervalNumber::new(144 * 10)).unwrap();
        EndorsedReport::new(&tek, Miid::new("LAB").unwrap(), vec![byte; 4])
    }

    fn publication(epoch_id: u32, chain: &mut SimChain) -> EpochPublication {
        let reports = vec![report(1), report(2), report(3)];
        let (root, _) = build_root(&reports.iter().map(EndorsedReport::encode).collect::<Vec<_>>()).unwrap();
        let receipt = chain.store(root);
        EpochPublication { epoch_id, root, anchor_block: receipt.block_number, reports }
    }

    #[test]
    fn file_round_trip() {
        let mut chain = SimChain::new();
        let p = publication(7, &mut chain);
        let bytes = p.encode();
        assert_eq!(&bytes[0..4], &7u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(EpochPublication::decode(&bytes).unwrap(), p);
        assert!(EpochPublication::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes;
        extra.push(9);
        assert_eq!(EpochPublication::decode(&extra), Err(ProtocolError::TrailingBytes(1)));
    }

    #[test]
    fn verification_outcomes() {
        let timing = LedgerTiming { genesis: IntervalNumber::new(1440), epoch_length: 144, blocks_per_interval: 1 };
        let mut chain = SimChain::new();
        chain.advance_block(143).unwrap();
        let p = publication(0, &mut chain);
        assert_eq!(verify_publication(&p, &chain, &timing), Ok(5));

        let mut swapped = p.clone();
        swapped.reports.swap(0, 1);
        assert!(matches!(verify_publication(&swapped, &chain, &timing), Err(PublicationRejection::RootMismatch { .. })));

        let mut wrong_block = p.clone();
        wrong_block.anchor_block += 1;
        assert!(matches!(
            verify_publication(&wrong_block, &chain, &timing),
            Err(PublicationRejection::AnchorBlockMismatch { .. })
        ));

        let mut late = p.clone();
        late.epoch_id = 5;
        assert_eq!(
            verify_publication(&late, &chain, &timing),
            Err(PublicationRejection::Implausible { block: 144, epoch: 5 })
        );

        let fresh = SimChain::new();
        assert_eq!(verify_publication(&p, &fresh, &timing), Err(PublicationRejection::NotAnchored(p.root)));
    }

    #[test]
    fn timing() {
        let timing = LedgerTiming { genesis: IntervalNumber::new(1440), epoch_length: 144, blocks_per_interval: 2 };
        assert_eq!(timing.blocks_per_epoch(), 288);
        assert_eq!(timing.epoch_of(IntervalNumber::new(1440 + 143)), 0);
        assert_eq!(timing.epoch_of(IntervalNumber::new(1440 + 144)), 1);
        assert_eq!(timing.epoch_end(0), IntervalNumber::new(1584));
    }
}
