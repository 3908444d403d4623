//! Merkle accumulator for one epoch of reports.
//!
//! Leaves are `SHA-256(0x00 || report)`, inner nodes `SHA-256(0x01 || left || right)`.
//! A level with an odd node count promotes its last node unchanged, so a tree
//! over `n` leaves always costs `n` leaf digests plus `n - 1` node digests.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
const LEAF_PREFIX: u8 = 0x00;
const NODE_PREFIX: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MerkleError {
    #[error("leaf data must not be empty")]
    EmptyLeaf,
    #[error("node inputs must be {DIGEST_LEN} bytes (got {left} and {right})")]
    NodeLength { left: usize, right: usize },
    #[error("cannot build a tree without leaves")]
    EmptyTree,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("epoch {0} is already finalized")]
    AlreadyFinalized(u32),
    #[error("malformed proof encoding: {0}")]
    MalformedProof(&'static str),
}

/// A SHA-256 output. Displays and serializes as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; DIGEST_LEN];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Self(out))
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; DIGEST_LEN]>::try_from(bytes).ok().map(Self)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn leaf_hash(data: &[u8]) -> Result<Digest, MerkleError> {
    if data.is_empty() {
        return Err(MerkleError::EmptyLeaf);
    }
    let mut hasher = Sha256::new();
    hasher.update([LEAF_PREFIX]);
    hasher.update(data);
    Ok(Digest(hasher.finalize().into()))
}

/// Checked variant of [`hash_pair`] for untyped input.
pub fn node_hash(left: &[u8], right: &[u8]) -> Result<Digest, MerkleError> {
    match (Digest::from_slice(left), Digest::from_slice(right)) {
        (Some(l), Some(r)) => Ok(hash_pair(&l, &r)),
        _ => Err(MerkleError::NodeLength {
            left: left.len(),
            right: right.len(),
        }),
    }
}

pub fn hash_pair(left: &Digest, right: &Digest) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update([NODE_PREFIX]);
    hasher.update(left.0);
    hasher.update(right.0);
    Digest(hasher.finalize().into())
}

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => hash_pair(l, r),
            [single] => *single,
            _ => unreachable!(),
        })
        .collect()
}

fn next_level_parallel(level: &[Digest]) -> Vec<Digest> {
    level
        .par_chunks(2)
        .map(|pair| match pair {
            [l, r] => hash_pair(l, r),
            [single] => *single,
            _ => unreachable!(),
        })
        .collect()
}

/// A finalized tree. `levels[0]` holds the leaves, the last level the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    levels: Vec<Vec<Digest>>,
    digest_count: u64,
}

impl MerkleTree {
    /// Hashes every item as a leaf and builds the tree sequentially.
    pub fn build<T: AsRef<[u8]>>(items: &[T]) -> Result<Self, MerkleError> {
        let leaves = items.iter().map(|item| leaf_hash(item.as_ref())).collect::<Result<Vec<_>, _>>()?;
        Self::from_leaf_digests(leaves, items.len() as u64, next_level)
    }

    /// Same tree as [`MerkleTree::build`], with each level hashed on a rayon pool
    /// of `workers` threads.
    pub fn build_parallel<T: AsRef<[u8]> + Sync>(items: &[T], workers: usize) -> Result<Self, MerkleError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| {
            let leaves = items
                .par_iter()
                .map(|item| leaf_hash(item.as_ref()))
                .collect::<Result<Vec<_>, _>>()?;
            Self::from_leaf_digests(leaves, items.len() as u64, next_level_parallel)
        })
    }

    fn from_leaf_digests(leaves: Vec<Digest>, leaf_digests: u64, step: fn(&[Digest]) -> Vec<Digest>) -> Result<Self, MerkleError> {
        if leaves.is_empty() {
            return Err(MerkleError::EmptyTree);
        }
        let mut digest_count = leaf_digests;
        let mut levels = vec![leaves];
        while levels.last().expect("nonempty").len() > 1 {
            let current = levels.last().expect("nonempty");
            let next = step(current);
            digest_count += (current.len() / 2) as u64;
            levels.push(next);
        }
        Ok(Self { levels, digest_count })
    }

    pub fn root(&self) -> Digest {
        self.levels.last().expect("nonempty")[0]
    }

    pub fn leaves(&self) -> &[Digest] {
        &self.levels[0]
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Leaf digests plus inner-node digests computed while building.
    pub fn digest_count(&self) -> u64 {
        self.digest_count
    }

    /// Number of levels above the leaves; this is the sequential depth of a parallel build.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn prove(&self, index: usize) -> Result<MerkleProof, MerkleError> {
        if index >= self.len() {
            return Err(MerkleError::IndexOutOfRange { index, len: self.len() });
        }
        let mut siblings = Vec::with_capacity(self.depth());
        let mut position = index;
        for level in &self.levels[..self.levels.len() - 1] {
            let sibling = position ^ 1;
            if sibling < level.len() {
                let side = if sibling < position { Side::Left } else { Side::Right };
                siblings.push((side, level[sibling]));
            }
            position /= 2;
        }
        Ok(MerkleProof {
            leaf_index: index as u32,
            siblings,
        })
    }
}

/// Root and digest count without keeping the tree around.
pub fn build_root<T: AsRef<[u8]>>(items: &[T]) -> Result<(Digest, u64), MerkleError> {
    let tree = MerkleTree::build(items)?;
    Ok((tree.root(), tree.digest_count()))
}

/// Which side of the running hash a sibling sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleProof {
    pub leaf_index: u32,
    pub siblings: Vec<(Side, Digest)>,
}

impl MerkleProof {
    pub fn root_from(&self, leaf: &Digest) -> Digest {
        self.siblings.iter().fold(*leaf, |acc, (side, sibling)| match side {
            Side::Left => hash_pair(sibling, &acc),
            Side::Right => hash_pair(&acc, sibling),
        })
    }

    /// `leaf_index u32 LE || count u16 LE || (side byte || digest)*`, side 0x00 = left.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + self.siblings.len() * 33);
        out.extend_from_slice(&self.leaf_index.to_le_bytes());
        out.extend_from_slice(&(self.siblings.len() as u16).to_le_bytes());
        for (side, digest) in &self.siblings {
            out.push(match side {
                Side::Left => 0x00,
                Side::Right => 0x01,
            });
            out.extend_from_slice(&digest.0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MerkleError> {
        if bytes.len() < 6 {
            return Err(MerkleError::MalformedProof("truncated header"));
        }
        let leaf_index = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"));
        let count = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let body = &bytes[6..];
        if body.len() != count * (DIGEST_LEN + 1) {
            return Err(MerkleError::MalformedProof("sibling count does not match length"));
        }
        let siblings = body
            .chunks(DIGEST_LEN + 1)
            .map(|chunk| {
                let side = match chunk[0] {
                    0x00 => Side::Left,
                    0x01 => Side::Right,
                    _ => return Err(MerkleError::MalformedProof("unknown side byte")),
                };
                Ok((side, Digest::from_slice(&chunk[1..]).expect("32 bytes")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { leaf_index, siblings })
    }
}

pub fn verify_proof(root: &Digest, leaf: &Digest, proof: &MerkleProof) -> bool {
    proof.root_from(leaf) == *root
}

/// Reports collected during one epoch, shuffled once on finalization.
#[derive(Debug, Clone)]
pub struct EpochBatch<T> {
    epoch_id: u32,
    pending: Vec<T>,
    shuffle_seed: [u8; 32],
    finalized: bool,
}

impl<T: AsRef<[u8]>> EpochBatch<T> {
    pub fn new(epoch_id: u32, shuffle_seed: [u8; 32]) -> Self {
        Self {
            epoch_id,
            pending: Vec::new(),
            shuffle_seed,
            finalized: false,
        }
    }

    pub fn epoch_id(&self) -> u32 {
        self.epoch_id
    }

    pub fn pending(&self) -> &[T] {
        &self.pending
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn push(&mut self, item: T) -> Result<(), MerkleError> {
        if self.finalized {
            return Err(MerkleError::AlreadyFinalized(self.epoch_id));
        }
        self.pending.push(item);
        Ok(())
    }

    /// Shuffles the pending items with the batch seed and builds their tree.
    /// The items are handed back in leaf order.
    pub fn finalize(&mut self) -> Result<(Vec<T>, MerkleTree), MerkleError> {
        if self.finalized {
            return Err(MerkleError::AlreadyFinalized(self.epoch_id));
        }
        if self.pending.is_empty() {
            return Err(MerkleError::EmptyTree);
        }
        let mut items = std::mem::take(&mut self.pending);
        shuffle(&mut items, self.shuffle_seed);
        let tree = MerkleTree::build(&items)?;
        self.finalized = true;
        self.shuffle_seed = [0u8; 32];
        Ok((items, tree))
    }
}

/// Fisher-Yates driven by ChaCha20 seeded with `seed`.
pub fn shuffle<T>(items: &mut [T], seed: [u8; 32]) {
    let mut rng = ChaCha20Rng::from_seed(seed);
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i as u64) as usize;
        items.swap(i, j);
    }
}
