//! In-process chain exposing the write-once anchoring contract.
//!
//! ```text
//! getStored(d) -> _digests[d]            (0 when absent)
//! isStored(d)  -> _digests[d] > 0
//! store(d)     -> isRes = _digests[d] > 0; if !isRes { _digests[d] = block.number }; isRes
//! ```
//!
//! Blocks start at 1, so a stored digest always maps to a nonzero block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::merkle::{Digest, DIGEST_LEN};

pub const GENESIS_BLOCK: u64 = 1;
pub const DEFAULT_PLAUSIBILITY_SLACK_EPOCHS: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("blocks can only advance by a positive count")]
    ZeroAdvance,
    #[error("digest must be {DIGEST_LEN} bytes, got {0}")]
    MalformedDigest(usize),
    #[error("digest {0} is not stored")]
    NotStored(Digest),
    #[error("blocks per epoch must be positive")]
    ZeroEpochLength,
    #[error("invalid chain export: {0}")]
    InvalidExport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorReceipt {
    pub digest: Digest,
    pub block_number: u64,
    pub already_stored: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimChain {
    block_number: u64,
    digests: BTreeMap<Digest, u64>,
    store_calls: u64,
}

impl Default for SimChain {
    fn default() -> Self {
        Self::new()
    }
}

impl SimChain {
    pub fn new() -> Self {
        Self {
            block_number: GENESIS_BLOCK,
            digests: BTreeMap::new(),
            store_calls: 0,
        }
    }

    pub fn block_number(&self) -> u64 {
        self.block_number
    }

    /// Number of `store` transactions submitted, including repeats.
    pub fn store_calls(&self) -> u64 {
        self.store_calls
    }

    pub fn advance_block(&mut self, k: u64) -> Result<u64, ChainError> {
        if k == 0 {
            return Err(ChainError::ZeroAdvance);
        }
        self.block_number += k;
        Ok(self.block_number)
    }

    /// Raw-bytes entry point; rejects anything that is not a 32-byte digest.
    pub fn store_bytes(&mut self, digest: &[u8]) -> Result<AnchorReceipt, ChainError> {
        let digest = Digest::from_slice(digest).ok_or(ChainError::MalformedDigest(digest.len()))?;
        Ok(self.store(digest))
    }

    pub fn store(&mut self, digest: Digest) -> AnchorReceipt {
        self.store_calls += 1;
        let already_stored = self.is_stored(&digest);
        if !already_stored {
            self.digests.insert(digest, self.block_number);
        }
        AnchorReceipt {
            digest,
            block_number: self.get_stored(&digest),
            already_stored,
        }
    }

    pub fn get_stored(&self, digest: &Digest) -> u64 {
        self.digests.get(digest).copied().unwrap_or(0)
    }

    pub fn is_stored(&self, digest: &Digest) -> bool {
        self.get_stored(digest) > 0
    }

    /// Whether `digest` was stored inside the block range of `expected_epoch`,
    /// widened by `slack_epochs` on both sides (inclusive).
    pub fn plausibility_window_with_slack(
        &self,
        digest: &Digest,
        expected_epoch: u64,
        blocks_per_epoch: u64,
        slack_epochs: u64,
    ) -> Result<bool, ChainError> {
        if blocks_per_epoch == 0 {
            return Err(ChainError::ZeroEpochLength);
        }
        let block = self.get_stored(digest);
        if block == 0 {
            return Err(ChainError::NotStored(*digest));
        }
        let (low, high) = epoch_block_range(expected_epoch, blocks_per_epoch, slack_epochs);
        Ok((low..=high).contains(&block))
    }

    pub fn plausibility_window(&self, digest: &Digest, expected_epoch: u64, blocks_per_epoch: u64) -> Result<bool, ChainError> {
        self.plausibility_window_with_slack(digest, expected_epoch, blocks_per_epoch, DEFAULT_PLAUSIBILITY_SLACK_EPOCHS)
    }

    pub fn export(&self) -> ChainExport {
        ChainExport {
            block_number: self.block_number,
            digests: self.digests.iter().map(|(d, b)| (d.to_hex(), *b)).collect(),
        }
    }

    pub fn from_export(export: &ChainExport) -> Result<Self, ChainError> {
        let mut digests = BTreeMap::new();
        for (hex_digest, &block) in &export.digests {
            let digest = Digest::from_hex(hex_digest).map_err(|e| ChainError::InvalidExport(format!("{hex_digest}: {e}")))?;
            if block == 0 || block > export.block_number {
                return Err(ChainError::InvalidExport(format!("{hex_digest}: block {block} out of range")));
            }
            digests.insert(digest, block);
        }
        Ok(Self {
            block_number: export.block_number,
            digests,
            store_calls: 0,
        })
    }
}

/// Inclusive block range of `epoch`, widened by `slack` epochs each way.
/// Epoch `e` covers blocks `[1 + e*bpe, (e+1)*bpe]`.
pub fn epoch_block_range(epoch: u64, blocks_per_epoch: u64, slack: u64) -> (u64, u64) {
    let low = GENESIS_BLOCK + epoch.saturating_sub(slack) * blocks_per_epoch;
    let high = GENESIS_BLOCK + (epoch + 1 + slack) * blocks_per_epoch - 1;
    (low, high)
}

/// JSON form: `{"block_number": n, "digests": {"<hex>": block, ...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainExport {
    pub block_number: u64,
    pub digests: BTreeMap<String, u64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(b: u8) -> Digest {
        Digest([b; 32])
    }

    #[test]
    fn advancing_blocks() {
        let mut chain = SimChain::new();
        assert_eq!(chain.block_number(), 1);
        assert_eq!(chain.advance_block(1).unwrap(), 2);
        assert_eq!(chain.advance_block(0), Err(ChainError::ZeroAdvance));
        chain.advance_block(10).unwrap();
        assert_eq!(chain.advance_block(5).unwrap(), 17);
    }

    #[test]
    fn store_is_write_once() {
        let mut chain = SimChain::new();
        chain.advance_block(6).unwrap();
        let first = chain.store(d(1));
        assert_eq!(first, AnchorReceipt { digest: d(1), block_number: 7, already_stored: false });
        chain.advance_block(2).unwrap();
        let again = chain.store(d(1));
        assert_eq!(again, AnchorReceipt { digest: d(1), block_number: 7, already_stored: true });
        assert_eq!(chain.get_stored(&d(1)), 7);

        let other = chain.store(d(2));
        assert_eq!(other.block_number, 9);
        assert!(!other.already_stored);
        assert_eq!(chain.store_calls(), 3);
    }

    #[test]
    fn repeat_store_in_the_same_block_is_reported() {
        let mut chain = SimChain::new();
        assert!(!chain.store(d(3)).already_stored);
        assert!(chain.store(d(3)).already_stored);
    }

    #[test]
    fn lookups() {
        let mut chain = SimChain::new();
        assert_eq!(chain.get_stored(&d(9)), 0);
        assert!(!chain.is_stored(&d(9)));
        chain.advance_block(4).unwrap();
        chain.store(d(9));
        assert_eq!(chain.get_stored(&d(9)), 5);
        assert!(chain.is_stored(&d(9)));
        chain.advance_block(100).unwrap();
        assert_eq!(chain.get_stored(&d(9)), 5);
        assert_eq!(chain.store_bytes(&[0u8; 31]), Err(ChainError::MalformedDigest(31)));
    }

    #[test]
    fn plausibility() {
        let bpe = 144;
        let mut chain = SimChain::new();
        // Epoch 5 is blocks 721..=864; with one epoch of slack, 577..=1008.
        assert_eq!(epoch_block_range(5, bpe, 0), (721, 864));
        assert_eq!(epoch_block_range(5, bpe, 1), (577, 1008));
        chain.advance_block(800 - 1).unwrap();
        chain.store(d(1));
        assert!(chain.plausibility_window(&d(1), 5, bpe).unwrap());

        chain.advance_block(1008 - 800).unwrap();
        chain.store(d(2));
        assert!(chain.plausibility_window(&d(2), 5, bpe).unwrap());

        // Three epochs late.
        chain.advance_block(1 + 8 * 144 - 1008).unwrap();
        chain.store(d(3));
        assert_eq!(chain.get_stored(&d(3)), 1 + 8 * 144);
        assert!(!chain.plausibility_window(&d(3), 5, bpe).unwrap());

        assert_eq!(chain.plausibility_window(&d(4), 5, bpe), Err(ChainError::NotStored(d(4))));
        assert_eq!(chain.plausibility_window(&d(1), 5, 0), Err(ChainError::ZeroEpochLength));
    }

    #[test]
    fn export_round_trip() {
        let mut chain = SimChain::new();
        chain.store(d(1));
        chain.advance_block(3).unwrap();
        chain.store(d(2));
        let export = chain.export();
        let json = serde_json::to_string(&export).unwrap();
        assert!(json.starts_with("{\"block_number\":4,"));
        let back = SimChain::from_export(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.get_stored(&d(2)), 4);
        assert_eq!(back.block_number(), 4);

        let mut bad = export.clone();
        bad.digests.insert(d(5).to_hex(), 99);
        assert!(SimChain::from_export(&bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stored_block_never_changes(ops in proptest::collection::vec((0u8..6, 0u64..4), 1..80)) {
                let mut chain = SimChain::new();
                let mut first: BTreeMap<u8, u64> = BTreeMap::new();
                for (digest, advance) in ops {
                    if advance > 0 {
                        chain.advance_block(advance).unwrap();
                    }
                    let receipt = chain.store(d(digest));
                    let expected = *first.entry(digest).or_insert(chain.block_number());
                    prop_assert_eq!(receipt.block_number, expected);
                    for (&k, &v) in &first {
                        prop_assert_eq!(chain.get_stored(&d(k)), v);
                        prop_assert_eq!(chain.is_stored(&d(k)), chain.get_stored(&d(k)) > 0);
                    }
                }
            }
        }
    }
}
