//! Probable-prime generation for RSA keys.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};

const SMALL_PRIMES: [u32; 53] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109,
    113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233, 239,
    241, 251,
];

const MILLER_RABIN_ROUNDS: usize = 32;

/// Miller-Rabin with random bases after trial division.
pub fn is_probable_prime<R: RngCore + CryptoRng>(candidate: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if candidate < &two {
        return false;
    }
    for &p in std::iter::once(&2u32).chain(SMALL_PRIMES.iter()) {
        let p = BigUint::from(p);
        if candidate == &p {
            return true;
        }
        if (candidate % &p).is_zero() {
            return false;
        }
    }

    let n_minus_one = candidate - 1u32;
    let s = n_minus_one.trailing_zeros().expect("candidate is odd and > 2");
    let d = &n_minus_one >> s;

    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = rng.gen_biguint_range(&two, &n_minus_one);
        let mut x = a.modpow(&d, candidate);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, candidate);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// A random probable prime with exactly `bits` bits and the top two bits set,
/// so that the product of two such primes has the full width.
pub fn random_prime<R: RngCore + CryptoRng>(rng: &mut R, bits: usize) -> BigUint {
    assert!(bits >= 8, "prime size too small");
    loop {
        let mut candidate = rng.gen_biguint(bits as u64);
        candidate.set_bit(bits as u64 - 1, true);
        candidate.set_bit(bits as u64 - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, rng) {
            return candidate;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sieve(limit: usize) -> Vec<bool> {
        let mut is_prime = vec![true; limit];
        is_prime[0] = false;
        is_prime[1] = false;
        for i in 2..limit {
            if is_prime[i] {
                for j in (i * i..limit).step_by(i) {
                    is_prime[j] = false;
                }
            }
        }
        is_prime
    }

    #[test]
    fn agrees_with_sieve_below_5000() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let table = sieve(5000);
        for (n, &expected) in table.iter().enumerate() {
            assert_eq!(is_probable_prime(&BigUint::from(n), &mut rng), expected, "n = {n}");
        }
    }

    #[test]
    fn rejects_carmichael_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for n in [561u64, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265, 321197185] {
            assert!(!is_probable_prime(&BigUint::from(n), &mut rng), "{n}");
        }
        // 2^127 - 1
        let mersenne = (BigUint::one() << 127u32) - 1u32;
        assert!(is_probable_prime(&mersenne, &mut rng));
    }

    #[test]
    fn generated_primes_have_requested_width() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for bits in [16usize, 64, 256] {
            let p = random_prime(&mut rng, bits);
            assert_eq!(p.bits() as usize, bits);
        }
    }
}
