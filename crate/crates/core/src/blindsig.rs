//! Chaum blind signatures over RSA with a full-domain hash.
//!
//! The requester blinds `FDH(m) * r^e mod n`, the institute raises the blinded
//! value to `d`, and the requester divides out `r` to get an ordinary RSA-FDH
//! signature `FDH(m)^d mod n`. The institute never sees `m` or `FDH(m)`.
//!
//! Two message encodings exist. [`MessageEncoding::FullDomainHash`] is the
//! real path. [`MessageEncoding::Identity`] reads the message as a big-endian
//! integer below `n`; it only exists so tiny textbook keys can be checked by
//! hand.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PRODUCTION_MODULUS_BITS: usize = 2048;
pub const DEFAULT_PUBLIC_EXPONENT: u32 = 65_537;
pub const MIID_LEN: usize = 8;

// Extra FDH output beyond the modulus width so the reduction mod n is close to uniform.
const FDH_EXTRA_BYTES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlindSigError {
    #[error("modulus must be at least 4")]
    ModulusTooSmall,
    #[error("message value is not below the modulus")]
    MessageTooLarge,
    #[error("blinding factor is not invertible modulo n")]
    NonInvertibleFactor,
    #[error("malformed public key: {0}")]
    MalformedPublicKey(&'static str),
    #[error("institute id must be 1..=8 ASCII characters")]
    InvalidMiid,
    #[error("key size {0} bits is too small")]
    KeyTooSmall(usize),
}

/// Medical institute identifier: 8 ASCII bytes, space padded.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Miid([u8; MIID_LEN]);

impl Miid {
    pub fn new(name: &str) -> Result<Self, BlindSigError> {
        if name.is_empty() || name.len() > MIID_LEN || !name.is_ascii() {
            return Err(BlindSigError::InvalidMiid);
        }
        let mut bytes = [b' '; MIID_LEN];
        bytes[..name.len()].copy_from_slice(name.as_bytes());
        Ok(Self(bytes))
    }

    pub fn from_bytes(bytes: [u8; MIID_LEN]) -> Result<Self, BlindSigError> {
        if !bytes.is_ascii() {
            return Err(BlindSigError::InvalidMiid);
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; MIID_LEN] {
        &self.0
    }

    /// The identifier without trailing padding.
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.0).expect("ascii").trim_end_matches(' ')
    }
}

impl std::fmt::Debug for Miid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Miid({:?})", self.as_str())
    }
}

impl std::fmt::Display for Miid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Miid {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Miid {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Miid::new(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MessageEncoding {
    #[default]
    FullDomainHash,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    miid: Miid,
    n: BigUint,
    e: BigUint,
    encoding: MessageEncoding,
}

impl PublicKey {
    pub fn new(miid: Miid, n: BigUint, e: BigUint) -> Result<Self, BlindSigError> {
        if n < BigUint::from(4u32) {
            return Err(BlindSigError::ModulusTooSmall);
        }
        if e < BigUint::from(3u32) {
            return Err(BlindSigError::MalformedPublicKey("exponent below 3"));
        }
        Ok(Self {
            miid,
            n,
            e,
            encoding: MessageEncoding::FullDomainHash,
        })
    }

    /// Same key, but messages are read as integers instead of hashed.
    pub fn with_identity_encoding(mut self) -> Self {
        self.encoding = MessageEncoding::Identity;
        self
    }

    pub fn miid(&self) -> Miid {
        self.miid
    }

    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    pub fn exponent(&self) -> &BigUint {
        &self.e
    }

    pub fn encoding(&self) -> MessageEncoding {
        self.encoding
    }

    /// Byte width of the modulus; signatures are serialized at this width.
    pub fn modulus_len(&self) -> usize {
        (self.n.bits() as usize).div_ceil(8)
    }

    /// Maps a message into `[0, n)` according to the key's encoding.
    pub fn encode_message(&self, message: &[u8]) -> Result<BigUint, BlindSigError> {
        match self.encoding {
            MessageEncoding::FullDomainHash => fdh(message, &self.n),
            MessageEncoding::Identity => {
                let m = BigUint::from_bytes_be(message);
                if m >= self.n {
                    return Err(BlindSigError::MessageTooLarge);
                }
                Ok(m)
            }
        }
    }

    /// `miid (8) || e_len u16 LE || e || n_len u16 LE || n`, integers big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let e = self.e.to_bytes_be();
        let n = self.n.to_bytes_be();
        let mut out = Vec::with_capacity(MIID_LEN + 4 + e.len() + n.len());
        out.extend_from_slice(&self.miid.0);
        out.extend_from_slice(&(e.len() as u16).to_le_bytes());
        out.extend_from_slice(&e);
        out.extend_from_slice(&(n.len() as u16).to_le_bytes());
        out.extend_from_slice(&n);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BlindSigError> {
        let mut rest = bytes;
        let miid = take(&mut rest, MIID_LEN).ok_or(BlindSigError::MalformedPublicKey("truncated miid"))?;
        let miid = Miid::from_bytes(miid.try_into().expect("8 bytes"))?;
        let e = take_prefixed(&mut rest).ok_or(BlindSigError::MalformedPublicKey("truncated exponent"))?;
        let n = take_prefixed(&mut rest).ok_or(BlindSigError::MalformedPublicKey("truncated modulus"))?;
        if !rest.is_empty() {
            return Err(BlindSigError::MalformedPublicKey("trailing bytes"));
        }
        Self::new(miid, BigUint::from_bytes_be(n), BigUint::from_bytes_be(e))
    }
}

fn take<'a>(buf: &mut &'a [u8], len: usize) -> Option<&'a [u8]> {
    if buf.len() < len {
        return None;
    }
    let (head, tail) = buf.split_at(len);
    *buf = tail;
    Some(head)
}

fn take_prefixed<'a>(buf: &mut &'a [u8]) -> Option<&'a [u8]> {
    let len = take(buf, 2)?;
    let len = u16::from_le_bytes([len[0], len[1]]) as usize;
    if len == 0 {
        return None;
    }
    take(buf, len)
}

#[derive(Clone)]
struct CrtParams {
    p: BigUint,
    q: BigUint,
    dp: BigUint,
    dq: BigUint,
    qinv: BigUint,
}

/// An institute's RSA signing key.
#[derive(Clone)]
pub struct InstituteKeyPair {
    public: PublicKey,
    d: BigUint,
    crt: Option<CrtParams>,
}

impl std::fmt::Debug for InstituteKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InstituteKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl InstituteKeyPair {
    /// Fresh key with `e = 65537` and two `bits / 2` primes.
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, bits: usize, miid: Miid) -> Result<Self, BlindSigError> {
        if bits < 64 {
            return Err(BlindSigError::KeyTooSmall(bits));
        }
        let e = BigUint::from(DEFAULT_PUBLIC_EXPONENT);
        loop {
            let p = crate::prime::random_prime(rng, bits / 2);
            let q = crate::prime::random_prime(rng, bits - bits / 2);
            if p == q {
                continue;
            }
            let n = &p * &q;
            if n.bits() as usize != bits {
                continue;
            }
            let lambda = (&p - 1u32).lcm(&(&q - 1u32));
            let Some(d) = mod_inverse(&e, &lambda) else {
                continue;
            };
            return Self::from_primes(miid, p, q, e, d);
        }
    }

    fn from_primes(miid: Miid, p: BigUint, q: BigUint, e: BigUint, d: BigUint) -> Result<Self, BlindSigError> {
        let (p, q) = if p > q { (p, q) } else { (q, p) };
        let n = &p * &q;
        let dp = &d % (&p - 1u32);
        let dq = &d % (&q - 1u32);
        let qinv = mod_inverse(&q, &p).ok_or(BlindSigError::NonInvertibleFactor)?;
        Ok(Self {
            public: PublicKey::new(miid, n, e)?,
            d,
            crt: Some(CrtParams { p, q, dp, dq, qinv }),
        })
    }

    /// Key from raw `(n, e, d)` without the factorization. Used for textbook examples.
    pub fn from_components(miid: Miid, n: BigUint, e: BigUint, d: BigUint) -> Result<Self, BlindSigError> {
        Ok(Self {
            public: PublicKey::new(miid, n, e)?,
            d,
            crt: None,
        })
    }

    /// Signs raw message integers instead of full-domain hashes. Only meaningful
    /// for small worked examples.
    pub fn with_identity_encoding(mut self) -> Self {
        self.public = self.public.with_identity_encoding();
        self
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn private_exponent(&self) -> &BigUint {
        &self.d
    }

    fn raw_sign(&self, value: &BigUint) -> BigUint {
        match &self.crt {
            Some(crt) => {
                let m1 = (value % &crt.p).modpow(&crt.dp, &crt.p);
                let m2 = (value % &crt.q).modpow(&crt.dq, &crt.q);
                let m2_mod_p = &m2 % &crt.p;
                let diff = if m1 >= m2_mod_p {
                    m1 - m2_mod_p
                } else {
                    &crt.p - (m2_mod_p - m1)
                };
                let h = (crt.qinv.clone() * diff) % &crt.p;
                m2 + h * &crt.q
            }
            None => value.modpow(&self.d, &self.public.n),
        }
    }

    /// Signs a message directly, without blinding. Honest institutes never do
    /// this for reports; it exists for comparisons and adversarial scenarios.
    pub fn sign_plain(&self, message: &[u8]) -> Result<Endorsement, BlindSigError> {
        let m = self.public.encode_message(message)?;
        Ok(Endorsement(self.raw_sign(&m)))
    }
}

/// Integer inverse of `a` modulo `m`, if it exists.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    if m.is_zero() {
        return None;
    }
    let a = a % m;
    if a.is_zero() {
        return if m.is_one() { Some(BigUint::zero()) } else { None };
    }
    a.modinv(m)
}

/// Full-domain hash: SHA-256 in counter mode over `message || counter (u32 BE)`,
/// stretched to `len(n) + 16` bytes and reduced mod n.
pub fn fdh(message: &[u8], n: &BigUint) -> Result<BigUint, BlindSigError> {
    if n < &BigUint::from(4u32) {
        return Err(BlindSigError::ModulusTooSmall);
    }
    let width = (n.bits() as usize).div_ceil(8) + FDH_EXTRA_BYTES;
    let mut stream = Vec::with_capacity(width + 32);
    let mut counter = 0u32;
    while stream.len() < width {
        let mut hasher = Sha256::new();
        hasher.update(message);
        hasher.update(counter.to_be_bytes());
        stream.extend_from_slice(&hasher.finalize());
        counter += 1;
    }
    stream.truncate(width);
    Ok(BigUint::from_bytes_be(&stream) % n)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlindingFactor(BigUint);

impl BlindingFactor {
    /// Accepts `r` only if it is invertible modulo `n`.
    pub fn new(r: BigUint, public: &PublicKey) -> Result<Self, BlindSigError> {
        if r.is_zero() || r >= public.n || !r.gcd(&public.n).is_one() {
            return Err(BlindSigError::NonInvertibleFactor);
        }
        Ok(Self(r))
    }

    /// Uniform in `[2, n - 1]`, resampled until coprime with `n`.
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R, public: &PublicKey) -> Self {
        let low = BigUint::from(2u32);
        loop {
            let r = rng.gen_biguint_range(&low, &public.n);
            if r.gcd(&public.n).is_one() {
                return Self(r);
            }
        }
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlindedMessage(BigUint);

impl BlindedMessage {
    pub fn from_value(value: BigUint) -> Self {
        Self(value)
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }
}

/// The institute's answer to a blinded message, still wrapped in `r`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlindSignature(BigUint);

impl BlindSignature {
    pub fn value(&self) -> &BigUint {
        &self.0
    }
}

/// An unblinded RSA-FDH signature.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Endorsement(BigUint);

impl Endorsement {
    pub fn from_value(value: BigUint) -> Self {
        Self(value)
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    /// Big-endian, left-padded to the modulus width.
    pub fn to_bytes(&self, public: &PublicKey) -> Vec<u8> {
        let raw = self.0.to_bytes_be();
        let width = public.modulus_len().max(raw.len());
        let mut out = vec![0u8; width - raw.len()];
        out.extend_from_slice(&raw);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self(BigUint::from_bytes_be(bytes))
    }
}

pub fn blind<R: RngCore + CryptoRng>(
    message: &[u8],
    public: &PublicKey,
    rng: &mut R,
) -> Result<(BlindedMessage, BlindingFactor), BlindSigError> {
    let factor = BlindingFactor::random(rng, public);
    let blinded = blind_with_factor(message, public, &factor)?;
    Ok((blinded, factor))
}

/// `encode(m) * r^e mod n`.
pub fn blind_with_factor(message: &[u8], public: &PublicKey, factor: &BlindingFactor) -> Result<BlindedMessage, BlindSigError> {
    let m = public.encode_message(message)?;
    let masked = factor.0.modpow(&public.e, &public.n);
    Ok(BlindedMessage((m * masked) % &public.n))
}

/// `blinded^d mod n`.
pub fn sign_blinded(blinded: &BlindedMessage, key: &InstituteKeyPair) -> BlindSignature {
    let reduced = &blinded.0 % &key.public.n;
    BlindSignature(key.raw_sign(&reduced))
}

/// `blinded_sig * r^-1 mod n`.
pub fn unblind(
    blind_signature: &BlindSignature,
    factor: &BlindingFactor,
    public: &PublicKey,
) -> Result<Endorsement, BlindSigError> {
    let inverse = mod_inverse(&factor.0, &public.n).ok_or(BlindSigError::NonInvertibleFactor)?;
    Ok(Endorsement((&blind_signature.0 * inverse) % &public.n))
}

/// True iff `sig^e == encode(m) (mod n)`. Zero and out-of-range signatures never verify.
pub fn verify(message: &[u8], signature: &Endorsement, public: &PublicKey) -> bool {
    if signature.0.is_zero() || signature.0 >= public.n {
        return false;
    }
    match public.encode_message(message) {
        Ok(expected) => signature.0.modpow(&public.e, &public.n) == expected,
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn textbook() -> InstituteKeyPair {
        let miid = Miid::new("TINY").unwrap();
        InstituteKeyPair::from_components(miid, 33u32.into(), 3u32.into(), 7u32.into())
            .unwrap()
            .with_identity_encoding()
    }

    #[test]
    fn textbook_round_trip() {
        let key = textbook();
        let public = key.public_key();
        let m = [4u8];

        let r = BlindingFactor::new(2u32.into(), public).unwrap();
        let blinded = blind_with_factor(&m, public, &r).unwrap();
        assert_eq!(blinded.value(), &BigUint::from(32u32));

        let signed = sign_blinded(&blinded, &key);
        assert_eq!(signed.value(), &BigUint::from(32u32));

        assert_eq!(mod_inverse(&2u32.into(), &33u32.into()), Some(17u32.into()));
        let sig = unblind(&signed, &r, public).unwrap();
        assert_eq!(sig.value(), &BigUint::from(16u32));
        assert_eq!(sig.value().modpow(&3u32.into(), &33u32.into()), BigUint::from(4u32));
        assert!(verify(&m, &sig, public));
    }

    #[test]
    fn unit_factor_is_transparent() {
        let key = textbook();
        let public = key.public_key();
        let one = BlindingFactor::new(1u32.into(), public).unwrap();
        let blinded = blind_with_factor(&[4], public, &one).unwrap();
        assert_eq!(blinded.value(), &BigUint::from(4u32));
        let signed = sign_blinded(&blinded, &key);
        assert_eq!(unblind(&signed, &one, public).unwrap().value(), signed.value());
    }

    #[test]
    fn degenerate_blinded_values() {
        let key = textbook();
        let public = key.public_key();
        let one = sign_blinded(&BlindedMessage::from_value(1u32.into()), &key);
        assert_eq!(one.value(), &BigUint::from(1u32));
        let zero = sign_blinded(&BlindedMessage::from_value(0u32.into()), &key);
        assert!(zero.value().is_zero());
        assert!(!verify(&[0], &Endorsement(zero.value().clone()), public));
    }

    #[test]
    fn factors_sharing_a_prime_are_rejected() {
        let key = textbook();
        assert_eq!(
            BlindingFactor::new(3u32.into(), key.public_key()),
            Err(BlindSigError::NonInvertibleFactor)
        );
        assert_eq!(
            BlindingFactor::new(0u32.into(), key.public_key()),
            Err(BlindSigError::NonInvertibleFactor)
        );
    }

    #[test]
    fn identity_encoding_rejects_large_messages() {
        let key = textbook();
        assert_eq!(key.public_key().encode_message(&[40]), Err(BlindSigError::MessageTooLarge));
    }

    #[test]
    fn crt_agrees_with_plain_exponentiation() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let key = InstituteKeyPair::generate(&mut rng, 512, Miid::new("CRT").unwrap()).unwrap();
        let plain = InstituteKeyPair { crt: None, ..key.clone() };
        for _ in 0..20 {
            let v = rng.gen_biguint_below(key.public_key().modulus());
            assert_eq!(key.raw_sign(&v), plain.raw_sign(&v));
        }
    }

    #[test]
    fn fdh_is_deterministic_and_in_range() {
        let n = BigUint::from(1_000_003u32);
        assert_eq!(fdh(b"abc", &n).unwrap(), fdh(b"abc", &n).unwrap());
        assert_ne!(fdh(b"abc", &n).unwrap(), fdh(b"abd", &n).unwrap());
        assert!(fdh(b"abc", &n).unwrap() < n);
        assert_eq!(fdh(b"abc", &3u32.into()), Err(BlindSigError::ModulusTooSmall));
    }

    #[test]
    fn fdh_spreads_evenly_over_residues() {
        // 10^4 messages into 16 classes; chi-square with 15 dof, 0.999 quantile ~ 37.7.
        let n = BigUint::from(16u32);
        let mut counts = [0u32; 16];
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let mut msg = [0u8; 20];
            rng.fill_bytes(&mut msg);
            let v = fdh(&msg, &n).unwrap();
            let idx = v.to_u32_digits().first().copied().unwrap_or(0) as usize;
            counts[idx] += 1;
        }
        let expected = 10_000.0 / 16.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 37.7, "chi2 = {chi2}");
    }

    #[test]
    fn public_key_serialization() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let key = InstituteKeyPair::generate(&mut rng, 512, Miid::new("HOSP-1").unwrap()).unwrap();
        let bytes = key.public_key().to_bytes();
        assert_eq!(&bytes[..8], b"HOSP-1  ");
        assert_eq!(&bytes[8..10], &3u16.to_le_bytes());
        assert_eq!(&bytes[10..13], &[0x01, 0x00, 0x01]);
        assert_eq!(&bytes[13..15], &64u16.to_le_bytes());
        assert_eq!(PublicKey::from_bytes(&bytes).unwrap(), *key.public_key());
        assert!(PublicKey::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(PublicKey::from_bytes(&trailing).is_err());
    }

    #[test]
    fn cross_key_and_bit_flip_rejection() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = InstituteKeyPair::generate(&mut rng, 512, Miid::new("A").unwrap()).unwrap();
        let b = InstituteKeyPair::generate(&mut rng, 512, Miid::new("B").unwrap()).unwrap();
        let msg = b"tek and base interval";
        let (blinded, r) = blind(msg, a.public_key(), &mut rng).unwrap();
        let sig = unblind(&sign_blinded(&blinded, &a), &r, a.public_key()).unwrap();
        assert!(verify(msg, &sig, a.public_key()));
        assert!(!verify(msg, &sig, b.public_key()));
        let mut bytes = sig.to_bytes(a.public_key());
        bytes[10] ^= 0x08;
        assert!(!verify(msg, &Endorsement::from_bytes(&bytes), a.public_key()));
    }

    #[test]
    fn miid_padding() {
        let miid = Miid::new("ABC").unwrap();
        assert_eq!(miid.as_bytes(), b"ABC     ");
        assert_eq!(miid.as_str(), "ABC");
        assert!(Miid::new("TOO-LONG-ID").is_err());
        assert!(Miid::new("").is_err());
    }
}
