//! Endorsed report wire format.
//!
//! ```text
//! 0x01 || tek (16) || base_interval (u32 LE) || miid (8) || sig_len (u16 LE) || signature (BE)
//! ```
//!
//! Bytes `1..21` are exactly the message the institute signed.

use serde::{Deserialize, Serialize};

use crate::blindsig::{self, Endorsement, Miid, PublicKey, MIID_LEN};
use crate::keys::{IntervalNumber, KeyScheduleError, TemporaryExposureKey, TEK_ENCODED_LEN, TEK_LEN};

use super::ProtocolError;

pub const REPORT_VERSION: u8 = 0x01;
const HEADER_LEN: usize = 1 + TEK_ENCODED_LEN + MIID_LEN + 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EndorsedReport {
    #[serde(with = "crate::hexser::array")]
    pub tek: [u8; TEK_LEN],
    pub base_interval: IntervalNumber,
    pub miid: Miid,
    #[serde(with = "crate::hexser::bytes")]
    pub signature: Vec<u8>,
}

impl EndorsedReport {
    pub fn new(tek: &TemporaryExposureKey, miid: Miid, signature: Vec<u8>) -> Self {
        Self {
            tek: *tek.key(),
            base_interval: tek.base_interval(),
            miid,
            signature,
        }
    }

    pub fn from_endorsement(tek: &TemporaryExposureKey, endorsement: &Endorsement, public: &PublicKey) -> Self {
        Self::new(tek, public.miid(), endorsement.to_bytes(public))
    }

    /// `tek || base_interval`, the blind-signed message.
    pub fn signed_message(&self) -> [u8; TEK_ENCODED_LEN] {
        let mut out = [0u8; TEK_ENCODED_LEN];
        out[..TEK_LEN].copy_from_slice(&self.tek);
        out[TEK_LEN..].copy_from_slice(&self.base_interval.value().to_le_bytes());
        out
    }

    pub fn temporary_exposure_key(&self) -> Result<TemporaryExposureKey, KeyScheduleError> {
        TemporaryExposureKey::from_published(self.tek, self.base_interval)
    }

    pub fn endorsement(&self) -> Endorsement {
        Endorsement::from_bytes(&self.signature)
    }

    pub fn verify(&self, public: &PublicKey) -> bool {
        public.miid() == self.miid && blindsig::verify(&self.signed_message(), &self.endorsement(), public)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.signature.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(REPORT_VERSION);
        out.extend_from_slice(&self.signed_message());
        out.extend_from_slice(self.miid.as_bytes());
        let sig_len = u16::try_from(self.signature.len()).expect("signature fits a u16 length");
        out.extend_from_slice(&sig_len.to_le_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    /// Decodes one report from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), ProtocolError> {
        if bytes.len() < HEADER_LEN {
            return Err(ProtocolError::Truncated { needed: HEADER_LEN, available: bytes.len() });
        }
        if bytes[0] != REPORT_VERSION {
            return Err(ProtocolError::UnsupportedVersion(bytes[0]));
        }
        let tek = TemporaryExposureKey::from_bytes(&bytes[1..1 + TEK_ENCODED_LEN])?;
        let miid_start = 1 + TEK_ENCODED_LEN;
        let miid_bytes: [u8; MIID_LEN] = bytes[miid_start..miid_start + MIID_LEN].try_into().expect("slice length");
        let miid = Miid::from_bytes(miid_bytes).map_err(|_| ProtocolError::MalformedMiid)?;
        let sig_len = u16::from_le_bytes([bytes[HEADER_LEN - 2], bytes[HEADER_LEN - 1]]) as usize;
        let total = HEADER_LEN + sig_len;
        if bytes.len() < total {
            return Err(ProtocolError::Truncated { needed: total, available: bytes.len() });
        }
        let report = Self::new(&tek, miid, bytes[HEADER_LEN..total].to_vec());
        Ok((report, total))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let (report, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(ProtocolError::TrailingBytes(bytes.len() - used));
        }
        Ok(report)
    }
}

/// Verifies `report` against the institute key currently in `registry`.
pub fn verify_against_registry(report: &EndorsedReport, registry: &crate::registry::Registry) -> Result<bool, ProtocolError> {
    let public = registry
        .lookup(report.miid)
        .map_err(|_| ProtocolError::UnknownInstitute(report.miid))?;
    Ok(report.verify(&public))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindsig::InstituteKeyPair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tek() -> TemporaryExposureKey {
        TemporaryExposureKey::from_published([7u8; 16], IntervalNumber::new(2_682_432)).unwrap()
    }

    #[test]
    fn layout() {
        let miid = Miid::new("LAB-1").unwrap();
        let report = EndorsedReport::new(&tek(), miid, vec![0xaa, 0xbb, 0xcc]);
        let bytes = report.encode();
        assert_eq!(bytes.len(), 1 + 16 + 4 + 8 + 2 + 3);
        assert_eq!(bytes[0], 0x01);
        assert_eq!(&bytes[1..17], &[7u8; 16]);
        assert_eq!(&bytes[17..21], &2_682_432u32.to_le_bytes());
        assert_eq!(&bytes[1..21], &tek().to_bytes());
        assert_eq!(&bytes[21..29], b"LAB-1   ");
        assert_eq!(&bytes[29..31], &[3, 0]);
        assert_eq!(&bytes[31..], &[0xaa, 0xbb, 0xcc]);
        assert_eq!(EndorsedReport::decode(&bytes).unwrap(), report);
    }

    #[test]
    fn rejects_malformed_input() {
        let miid = Miid::new("LAB-1").unwrap();
        let bytes = EndorsedReport::new(&tek(), miid, vec![1, 2]).encode();
        assert!(matches!(EndorsedReport::decode(&bytes[..10]), Err(ProtocolError::Truncated { .. })));
        assert!(matches!(EndorsedReport::decode(&bytes[..bytes.len() - 1]), Err(ProtocolError::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(EndorsedReport::decode(&extra), Err(ProtocolError::TrailingBytes(1)));
        let mut version = bytes.clone();
        version[0] = 2;
        assert_eq!(EndorsedReport::decode(&version), Err(ProtocolError::UnsupportedVersion(2)));
        let mut misaligned = bytes;
        misaligned[17] ^= 1;
        assert!(matches!(EndorsedReport::decode(&misaligned), Err(ProtocolError::Key(_))));
    }

    #[test]
    fn signatures_verify_through_the_report() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let key = InstituteKeyPair::generate(&mut rng, 512, Miid::new("LAB-1").unwrap()).unwrap();
        let endorsement = key.sign_plain(&tek().to_bytes()).unwrap();
        let report = EndorsedReport::from_endorsement(&tek(), &endorsement, key.public_key());
        assert_eq!(report.signature.len(), key.public_key().modulus_len());
        assert!(report.verify(key.public_key()));

        let mut other = report.clone();
        other.base_interval = IntervalNumber::new(2_682_432 + 144);
        assert!(!other.verify(key.public_key()));
        let mut renamed = report;
        renamed.miid = Miid::new("LAB-2").unwrap();
        assert!(!renamed.verify(key.public_key()));
    }
}
