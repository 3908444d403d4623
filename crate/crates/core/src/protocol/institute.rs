use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blindsig::{sign_blinded, BlindSigError, BlindSignature, BlindedMessage, InstituteKeyPair, Miid, PublicKey};
use crate::keys::{IntervalNumber, KEY_RING_CAPACITY};

use super::AgentId;

pub const MAX_KEYS_PER_REQUEST: usize = KEY_RING_CAPACITY;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InstituteError {
    #[error("agent {0} has no positive test on record")]
    NoPositiveResult(AgentId),
    #[error("token {0:016x} was not issued here")]
    UnknownToken(u64),
    #[error("token {token:016x} issued at {issued_at} expired before {now}")]
    TokenExpired { token: u64, issued_at: IntervalNumber, now: IntervalNumber },
    #[error("token {0:016x} was already redeemed")]
    TokenReused(u64),
    #[error("at most {MAX_KEYS_PER_REQUEST} keys per request, got {0}")]
    TooManyKeys(usize),
    #[error(transparent)]
    Signature(#[from] BlindSigError),
}

/// Bearer credential handed to a patient after a positive test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestToken {
    pub id: u64,
    pub miid: Miid,
    pub issued_at: IntervalNumber,
}

/// What the institute saw and returned for one endorsement request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub miid: Miid,
    pub token: u64,
    pub at: IntervalNumber,
    pub blinded: Vec<String>,
    pub signatures: Vec<String>,
}

#[derive(Debug, Clone)]
struct TokenState {
    issued_at: IntervalNumber,
    redeemed: bool,
}

#[derive(Debug)]
pub struct MedicalInstitute {
    key: InstituteKeyPair,
    token_validity: u32,
    positives: BTreeSet<AgentId>,
    tokens: BTreeMap<u64, TokenState>,
    transcript: Vec<TranscriptEntry>,
    rng: ChaCha20Rng,
}

impl MedicalInstitute {
    pub fn new(key: InstituteKeyPair, token_validity: u32, seed: [u8; 32]) -> Self {
        Self {
            key,
            token_validity,
            positives: BTreeSet::new(),
            tokens: BTreeMap::new(),
            transcript: Vec::new(),
            rng: ChaCha20Rng::from_seed(seed),
        }
    }

    pub fn generate<R: RngCore + CryptoRng>(
        rng: &mut R,
        bits: usize,
        miid: Miid,
        token_validity: u32,
    ) -> Result<Self, BlindSigError> {
        let key = InstituteKeyPair::generate(rng, bits, miid)?;
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Ok(Self::new(key, token_validity, seed))
    }

    pub fn miid(&self) -> Miid {
        self.key.public_key().miid()
    }

    pub fn public_key(&self) -> &PublicKey {
        self.key.public_key()
    }

    /// Direct access to the signing key. Honest flows only sign through
    /// [`MedicalInstitute::endorse`].
    pub fn key_pair(&self) -> &InstituteKeyPair {
        &self.key
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn record_positive(&mut self, agent: AgentId) {
        self.positives.insert(agent);
    }

    pub fn issue_test_token(&mut self, agent: AgentId, now: IntervalNumber) -> Result<TestToken, InstituteError> {
        if !self.positives.contains(&agent) {
            return Err(InstituteError::NoPositiveResult(agent));
        }
        let mut id = self.rng.next_u64();
        while self.tokens.contains_key(&id) {
            id = self.rng.next_u64();
        }
        self.tokens.insert(id, TokenState { issued_at: now, redeemed: false });
        Ok(TestToken { id, miid: self.miid(), issued_at: now })
    }

    /// Signs up to 14 blinded keys against a fresh token. The token is spent
    /// even if the request is later found useless by the caller.
    pub fn endorse(
        &mut self,
        token: &TestToken,
        blinded: &[BlindedMessage],
        now: IntervalNumber,
    ) -> Result<Vec<BlindSignature>, InstituteError> {
        let state = self.tokens.get_mut(&token.id).ok_or(InstituteError::UnknownToken(token.id))?;
        if state.redeemed {
            return Err(InstituteError::TokenReused(token.id));
        }
        if now.value() >= state.issued_at.value().saturating_add(self.token_validity) || now < state.issued_at {
            return Err(InstituteError::TokenExpired { token: token.id, issued_at: state.issued_at, now });
        }
        if blinded.len() > MAX_KEYS_PER_REQUEST {
            return Err(InstituteError::TooManyKeys(blinded.len()));
        }
        state.redeemed = true;
        let signatures: Vec<BlindSignature> = blinded.iter().map(|b| sign_blinded(b, &self.key)).collect();
        self.transcript.push(TranscriptEntry {
            miid: self.miid(),
            token: token.id,
            at: now,
            blinded: blinded.iter().map(|b| hex::encode(b.value().to_bytes_be())).collect(),
            signatures: signatures.iter().map(|s| hex::encode(s.value().to_bytes_be())).collect(),
        });
        Ok(signatures)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindsig::{blind, unblind, verify};

    fn institute() -> MedicalInstitute {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        MedicalInstitute::generate(&mut rng, 512, Miid::new("LAB-A").unwrap(), 144).unwrap()
    }

    #[test]
    fn token_lifecycle() {
        let mut lab = institute();
        let now = IntervalNumber::new(1000);
        assert_eq!(lab.issue_test_token(3, now), Err(InstituteError::NoPositiveResult(3)));
        lab.record_positive(3);
        let token = lab.issue_test_token(3, now).unwrap();
        assert_eq!(token.miid, lab.miid());

        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (blinded, factor) = blind(b"message", lab.public_key(), &mut rng).unwrap();
        let late = IntervalNumber::new(1000 + 144);
        assert!(matches!(lab.endorse(&token, std::slice::from_ref(&blinded), late), Err(InstituteError::TokenExpired { .. })));

        let sigs = lab.endorse(&token, std::slice::from_ref(&blinded), IntervalNumber::new(1143)).unwrap();
        let endorsement = unblind(&sigs[0], &factor, lab.public_key()).unwrap();
        assert!(verify(b"message", &endorsement, lab.public_key()));
        assert_eq!(lab.endorse(&token, &[blinded], now), Err(InstituteError::TokenReused(token.id)));
        assert_eq!(lab.transcript().len(), 1);
        assert_eq!(lab.transcript()[0].blinded.len(), 1);

        let forged = TestToken { id: token.id ^ 1, ..token };
        assert_eq!(lab.endorse(&forged, &[], now), Err(InstituteError::UnknownToken(forged.id)));
    }

    #[test]
    fn request_size_is_capped() {
        let mut lab = institute();
        lab.record_positive(1);
        let token = lab.issue_test_token(1, IntervalNumber::new(0)).unwrap();
        let blinded = vec![BlindedMessage::from_value(2u32.into()); MAX_KEYS_PER_REQUEST + 1];
        assert_eq!(lab.endorse(&token, &blinded, IntervalNumber::new(0)), Err(InstituteError::TooManyKeys(15)));
    }
}
