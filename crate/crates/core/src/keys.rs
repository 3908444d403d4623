//! Application-side exposure key schedule.
//!
//! Time is counted in 10-minute interval numbers since the Unix epoch. Each
//! day the application draws a fresh 128-bit temporary exposure key (TEK)
//! from its own RNG; every identifier broadcast that day is derived from it:
//!
//! * rolling proximity ID key `RPIK = HKDF-SHA256(tek, salt = [], info = "EN-RPIK", 16)`
//! * rolling proximity ID `RPI_j = AES-128(RPIK, "EN-RPI" || 0^6 || j as u32 LE)`
//! * metadata key `AEMK = HKDF-SHA256(tek, salt = [], info = "EN-AEMK", 16)`
//! * encrypted metadata `AEM_j = AES-128-CTR(AEMK, iv = RPI_j, metadata)`
//!
//! Anyone holding a TEK and its base interval can re-derive all 144 IDs of
//! that day, which is what both matching and the audit rely on.

use std::ops::Range;

use aes::cipher::{BlockEncrypt, KeyInit, KeyIvInit, StreamCipher};
use aes::Aes128;
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

type Aes128Ctr = ctr::Ctr128BE<Aes128>;

pub const INTERVAL_SECONDS: u64 = 600;
pub const INTERVALS_PER_DAY: u32 = 144;
pub const KEY_RING_CAPACITY: usize = 14;
pub const TEK_LEN: usize = 16;
/// Serialized TEK: key bytes followed by the base interval (u32 LE).
pub const TEK_ENCODED_LEN: usize = TEK_LEN + 4;

const RPIK_INFO: &[u8] = b"EN-RPIK";
const AEMK_INFO: &[u8] = b"EN-AEMK";
const RPI_PREFIX: &[u8; 6] = b"EN-RPI";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyScheduleError {
    #[error("unix time {0} is beyond the last representable interval")]
    IntervalOutOfRange(u64),
    #[error("encoded key must be {expected} bytes, got {actual}")]
    MalformedKey { expected: usize, actual: usize },
    #[error("base interval {0} is not aligned to a day boundary")]
    MisalignedBase(u32),
}

/// Count of 10-minute periods since 1970-01-01T00:00:00Z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntervalNumber(u32);

impl IntervalNumber {
    pub const fn new(value: u32) -> Self {
        Self(value)
    }

    pub const fn value(self) -> u32 {
        self.0
    }

    /// First interval of the day containing `self`.
    pub const fn day_start(self) -> Self {
        Self(self.0 - self.0 % INTERVALS_PER_DAY)
    }

    pub const fn is_day_aligned(self) -> bool {
        self.0.is_multiple_of(INTERVALS_PER_DAY)
    }

    pub fn checked_add(self, intervals: u32) -> Option<Self> {
        self.0.checked_add(intervals).map(Self)
    }

    pub fn saturating_sub(self, intervals: u32) -> Self {
        Self(self.0.saturating_sub(intervals))
    }
}

impl std::fmt::Display for IntervalNumber {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl From<IntervalNumber> for u32 {
    fn from(value: IntervalNumber) -> Self {
        value.0
    }
}

/// `floor(unix_seconds / 600)`, failing once the result no longer fits in 32 bits.
pub fn interval_number(unix_seconds: u64) -> Result<IntervalNumber, KeyScheduleError> {
    let value = unix_seconds / INTERVAL_SECONDS;
    u32::try_from(value)
        .map(IntervalNumber)
        .map_err(|_| KeyScheduleError::IntervalOutOfRange(unix_seconds))
}

/// A day's secret key together with the interval at which it becomes valid.
///
/// New keys only come out of [`TemporaryExposureKey::generate`]; the decoding
/// path exists for keys that were published in reports or read back from logs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TemporaryExposureKey {
    key: [u8; TEK_LEN],
    base_interval: IntervalNumber,
}

impl TemporaryExposureKey {
    /// Draws 16 bytes from the application RNG; the base interval is `now`
    /// rounded down to the start of its day.
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, now: IntervalNumber) -> Self {
        let mut key = [0u8; TEK_LEN];
        rng.fill_bytes(&mut key);
        Self {
            key,
            base_interval: now.day_start(),
        }
    }

    /// Rebuilds a key that was already published or logged.
    pub fn from_published(key: [u8; TEK_LEN], base_interval: IntervalNumber) -> Result<Self, KeyScheduleError> {
        if !base_interval.is_day_aligned() {
            return Err(KeyScheduleError::MisalignedBase(base_interval.value()));
        }
        Ok(Self { key, base_interval })
    }

    pub fn key(&self) -> &[u8; TEK_LEN] {
        &self.key
    }

    pub fn base_interval(&self) -> IntervalNumber {
        self.base_interval
    }

    /// Interval numbers `[i, i + 144)` this key is valid for.
    pub fn validity(&self) -> Range<u32> {
        let start = self.base_interval.value();
        start..start.saturating_add(INTERVALS_PER_DAY)
    }

    pub fn covers(&self, interval: IntervalNumber) -> bool {
        self.validity().contains(&interval.value())
    }

    /// `key || base_interval (u32 LE)`. This is also the message that gets blind-signed.
    pub fn to_bytes(&self) -> [u8; TEK_ENCODED_LEN] {
        let mut out = [0u8; TEK_ENCODED_LEN];
        out[..TEK_LEN].copy_from_slice(&self.key);
        out[TEK_LEN..].copy_from_slice(&self.base_interval.value().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyScheduleError> {
        if bytes.len() != TEK_ENCODED_LEN {
            return Err(KeyScheduleError::MalformedKey {
                expected: TEK_ENCODED_LEN,
                actual: bytes.len(),
            });
        }
        let mut key = [0u8; TEK_LEN];
        key.copy_from_slice(&bytes[..TEK_LEN]);
        let base = u32::from_le_bytes(bytes[TEK_LEN..].try_into().expect("4 bytes"));
        Self::from_published(key, IntervalNumber(base))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RollingProximityKey([u8; 16]);

impl RollingProximityKey {
    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MetadataKey([u8; 16]);

impl MetadataKey {
    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

/// A 16-byte beacon identifier together with the interval it was derived for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RollingProximityId {
    pub id: [u8; 16],
    pub interval: IntervalNumber,
}

fn hkdf16(ikm: &[u8], info: &[u8]) -> [u8; 16] {
    let mut out = [0u8; 16];
    Hkdf::<Sha256>::new(None, ikm)
        .expand(info, &mut out)
        .expect("16 bytes is a valid HKDF-SHA256 output length");
    out
}

pub fn derive_rpik(tek: &TemporaryExposureKey) -> RollingProximityKey {
    RollingProximityKey(hkdf16(&tek.key, RPIK_INFO))
}

pub fn derive_aemk(tek: &TemporaryExposureKey) -> MetadataKey {
    MetadataKey(hkdf16(&tek.key, AEMK_INFO))
}

/// The padded plaintext block encrypted under the RPIK for interval `j`.
pub fn rpi_padded_data(j: IntervalNumber) -> [u8; 16] {
    let mut block = [0u8; 16];
    block[..6].copy_from_slice(RPI_PREFIX);
    block[12..].copy_from_slice(&j.value().to_le_bytes());
    block
}

pub fn derive_rpi(rpik: &RollingProximityKey, j: IntervalNumber) -> RollingProximityId {
    let cipher = Aes128::new(&rpik.0.into());
    let mut block = rpi_padded_data(j).into();
    cipher.encrypt_block(&mut block);
    RollingProximityId {
        id: block.into(),
        interval: j,
    }
}

/// All 144 identifiers of a TEK, ordered by interval.
pub fn rpi_window(tek: &TemporaryExposureKey) -> Vec<RollingProximityId> {
    DerivedKeys::new(tek).window()
}

/// Metadata plaintext: version byte, signed transmit power, two reserved bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataPlaintext {
    pub version: u8,
    pub tx_power: i8,
}

impl MetadataPlaintext {
    /// Major version 1, minor version 0 in the top nibble pairs.
    pub const CURRENT_VERSION: u8 = 0x40;

    pub fn new(tx_power: i8) -> Self {
        Self {
            version: Self::CURRENT_VERSION,
            tx_power,
        }
    }

    pub fn to_bytes(self) -> [u8; 4] {
        [self.version, self.tx_power as u8, 0, 0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssociatedMetadata {
    pub plaintext: [u8; 4],
    pub ciphertext: [u8; 4],
}

fn apply_metadata_keystream(aemk: &MetadataKey, rpi: &RollingProximityId, data: [u8; 4]) -> [u8; 4] {
    let mut buf = data;
    let mut cipher = Aes128Ctr::new(&aemk.0.into(), &rpi.id.into());
    cipher.apply_keystream(&mut buf);
    buf
}

pub fn encrypt_metadata(tek: &TemporaryExposureKey, j: IntervalNumber, plaintext: [u8; 4]) -> AssociatedMetadata {
    DerivedKeys::new(tek).encrypt_metadata(j, plaintext)
}

pub fn decrypt_metadata(tek: &TemporaryExposureKey, j: IntervalNumber, ciphertext: [u8; 4]) -> [u8; 4] {
    DerivedKeys::new(tek).decrypt_metadata(j, ciphertext)
}

/// Both HKDF outputs for one TEK, so repeated per-interval work skips re-deriving them.
#[derive(Debug, Clone)]
pub struct DerivedKeys {
    base_interval: IntervalNumber,
    rpik: RollingProximityKey,
    aemk: MetadataKey,
}

impl DerivedKeys {
    pub fn new(tek: &TemporaryExposureKey) -> Self {
        Self {
            base_interval: tek.base_interval,
            rpik: derive_rpik(tek),
            aemk: derive_aemk(tek),
        }
    }

    pub fn rpik(&self) -> &RollingProximityKey {
        &self.rpik
    }

    pub fn rpi(&self, j: IntervalNumber) -> RollingProximityId {
        derive_rpi(&self.rpik, j)
    }

    pub fn window(&self) -> Vec<RollingProximityId> {
        let cipher = Aes128::new(&self.rpik.0.into());
        let start = self.base_interval.value();
        (start..start.saturating_add(INTERVALS_PER_DAY))
            .map(|j| {
                let interval = IntervalNumber(j);
                let mut block = rpi_padded_data(interval).into();
                cipher.encrypt_block(&mut block);
                RollingProximityId {
                    id: block.into(),
                    interval,
                }
            })
            .collect()
    }

    pub fn encrypt_metadata(&self, j: IntervalNumber, plaintext: [u8; 4]) -> AssociatedMetadata {
        let rpi = self.rpi(j);
        AssociatedMetadata {
            plaintext,
            ciphertext: apply_metadata_keystream(&self.aemk, &rpi, plaintext),
        }
    }

    pub fn decrypt_metadata(&self, j: IntervalNumber, ciphertext: [u8; 4]) -> [u8; 4] {
        let rpi = self.rpi(j);
        apply_metadata_keystream(&self.aemk, &rpi, ciphertext)
    }
}

/// Up to 14 daily keys, oldest first.
#[derive(Debug, Clone, Default)]
pub struct KeyRing {
    entries: Vec<TemporaryExposureKey>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TemporaryExposureKey] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn latest(&self) -> Option<&TemporaryExposureKey> {
        self.entries.last()
    }

    /// The key whose validity window contains `now`, if the ring has one.
    pub fn current(&self, now: IntervalNumber) -> Option<&TemporaryExposureKey> {
        self.entries.iter().rev().find(|tek| tek.covers(now))
    }

    /// Generates a key for the day of `now` unless the ring already has one,
    /// evicting the oldest entry past capacity. Returns the new key, if any.
    pub fn advance<R: RngCore + CryptoRng>(&mut self, now: IntervalNumber, rng: &mut R) -> Option<&TemporaryExposureKey> {
        let day = now.day_start();
        if self.latest().is_some_and(|latest| latest.base_interval >= day) {
            return None;
        }
        self.entries.push(TemporaryExposureKey::generate(rng, now));
        if self.entries.len() > KEY_RING_CAPACITY {
            self.entries.remove(0);
        }
        self.entries.last()
    }
}
