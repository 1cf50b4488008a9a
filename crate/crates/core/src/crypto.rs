//! Keys, signatures, hashing and address derivation.
//!
//! Signatures are Ed25519 (RFC 8032) over raw message bytes, digests are
//! SHA-256. Key pairs are derived from a 32-byte seed so every simulation is
//! reproducible from its RNG seed.
//!
//! | item       | width |
//! |------------|-------|
//! | public key | 32    |
//! | secret key | 32    |
//! | signature  | 64    |
//! | hash       | 32    |
//! | address    | 20    |

use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SECRET_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const HASH_LEN: usize = 32;
pub const ADDRESS_LEN: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed key: expected {expected} bytes, got {got}")]
    MalformedKey { expected: usize, got: usize },
    #[error("malformed signature: expected {SIGNATURE_LEN} bytes, got {0}")]
    MalformedSignature(usize),
    #[error("invalid hex: {0}")]
    Hex(String),
}

macro_rules! fixed_bytes {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
                let arr: [u8; $len] = bytes.try_into().map_err(|_| CryptoError::MalformedKey {
                    expected: $len,
                    got: bytes.len(),
                })?;
                Ok(Self(arr))
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
                let s = s.strip_prefix("0x").unwrap_or(s);
                let bytes = hex::decode(s).map_err(|e| CryptoError::Hex(e.to_string()))?;
                Self::from_slice(&bytes)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), &self.to_hex()[..8])
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "0x{}", self.to_hex())
            }
        }

        impl FromStr for $name {
            type Err = CryptoError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::from_hex(s)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

fixed_bytes!(
    /// SHA-256 digest.
    Hash,
    HASH_LEN
);
fixed_bytes!(
    /// Ed25519 verifying key; the on-network identity of a participant.
    PublicKey,
    PUBLIC_KEY_LEN
);
fixed_bytes!(
    /// Account identifier: the first 20 bytes of `digest(public_key)`.
    Address,
    ADDRESS_LEN
);

impl Hash {
    pub const ZERO: Hash = Hash([0; HASH_LEN]);
}

impl Address {
    /// Unspendable sink for burned coins. No key hashes to it in practice.
    pub const BURN: Address = Address([0; ADDRESS_LEN]);
}

fixed_bytes!(
    /// Ed25519 signature.
    Signature,
    SIGNATURE_LEN
);

impl Signature {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        Self::from_slice(bytes).map_err(|_| CryptoError::MalformedSignature(bytes.len()))
    }
}

/// Secret half of a key pair. Debug output is redacted.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey([u8; SECRET_KEY_LEN]);

impl SecretKey {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; SECRET_KEY_LEN] =
            bytes.try_into().map_err(|_| CryptoError::MalformedKey {
                expected: SECRET_KEY_LEN,
                got: bytes.len(),
            })?;
        Ok(Self(arr))
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(SigningKey::from_bytes(&self.0).verifying_key().to_bytes())
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub public_key: PublicKey,
    pub secret_key: SecretKey,
}

impl KeyPair {
    pub fn address(&self) -> Address {
        derive_address(&self.public_key)
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        sign(message, &self.secret_key)
    }
}

pub fn generate_keypair(seed: [u8; 32]) -> KeyPair {
    let secret_key = SecretKey(seed);
    KeyPair {
        public_key: secret_key.public_key(),
        secret_key,
    }
}

/// Key pair derived from a label, for fixtures and genesis identities.
pub fn keypair_from_label(label: &[u8]) -> KeyPair {
    generate_keypair(digest(label).0)
}

pub fn sign(message: &[u8], secret_key: &SecretKey) -> Signature {
    Signature(SigningKey::from_bytes(&secret_key.0).sign(message).to_bytes())
}

/// Returns false for any malformed key or signature instead of erroring.
pub fn verify(message: &[u8], signature: &Signature, public_key: &PublicKey) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(&public_key.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    vk.verify_strict(message, &sig).is_ok()
}

pub fn digest(data: &[u8]) -> Hash {
    Hash(Sha256::digest(data).into())
}

/// Digest of the concatenation of `parts`.
pub fn digest_parts(parts: &[&[u8]]) -> Hash {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Hash(h.finalize().into())
}

pub fn derive_address(pk: &PublicKey) -> Address {
    let d = digest(&pk.0);
    let mut out = [0u8; ADDRESS_LEN];
    out.copy_from_slice(&d.0[..ADDRESS_LEN]);
    Address(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn seed(i: u64) -> [u8; 32] {
        let mut s = [0u8; 32];
        s[..8].copy_from_slice(&i.to_le_bytes());
        s
    }

    #[test]
    fn keypair_is_deterministic_per_seed() {
        assert_eq!(generate_keypair(seed(1)), generate_keypair(seed(1)));
        assert_ne!(
            generate_keypair(seed(1)).public_key,
            generate_keypair(seed(2)).public_key
        );
    }

    #[test]
    fn thousand_seeds_give_thousand_addresses() {
        let addrs: Vec<Address> = (0..1000).map(|i| generate_keypair(seed(i)).address()).collect();
        for i in 0..addrs.len() {
            for j in i + 1..addrs.len() {
                assert_ne!(addrs[i], addrs[j], "collision between seeds {i} and {j}");
            }
        }
    }

    #[test]
    fn sign_verify_roundtrip_and_tamper() {
        let kp = generate_keypair(seed(7));
        let other = generate_keypair(seed(8));
        let sig = kp.sign(b"hello");
        assert!(verify(b"hello", &sig, &kp.public_key));
        assert!(!verify(b"hellp", &sig, &kp.public_key));
        assert!(!verify(b"hello", &sig, &other.public_key));
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert_eq!(
            SecretKey::from_slice(&[0u8; 31]),
            Err(CryptoError::MalformedKey { expected: 32, got: 31 })
        );
        assert!(PublicKey::from_slice(&[1u8; 33]).is_err());
        assert_eq!(
            Signature::from_bytes(&[0u8; 10]),
            Err(CryptoError::MalformedSignature(10))
        );
        // Not a point on the curve; verification must return false rather than panic.
        let bogus = PublicKey([0xff; 32]);
        let kp = generate_keypair(seed(1));
        assert!(!verify(b"m", &kp.sign(b"m"), &bogus));
    }

    #[test]
    fn digest_behaviour() {
        assert_eq!(digest(b"x"), digest(b"x"));
        // SHA-256 of the empty string.
        assert_eq!(
            digest(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(digest_parts(&[b"ab", b"c"]), digest(b"abc"));
    }

    #[test]
    fn appended_zero_changes_digest_over_samples() {
        let mut seen = HashSet::new();
        for i in 0u32..10_000 {
            let x = i.to_le_bytes().repeat((i % 7) as usize + 1);
            let mut y = x.clone();
            y.push(0);
            let (dx, dy) = (digest(&x), digest(&y));
            assert_ne!(dx, dy);
            seen.insert(dx);
            seen.insert(dy);
        }
        assert_eq!(seen.len(), 20_000);
    }

    #[test]
    fn addresses_are_truncated_digests() {
        for i in 0..100 {
            let kp = generate_keypair(seed(i));
            let a = derive_address(&kp.public_key);
            assert_eq!(a.0.len(), 20);
            assert_eq!(a.0[..], digest(&kp.public_key.0).0[..20]);
            assert_eq!(a, derive_address(&kp.public_key));
        }
    }

    #[test]
    fn hex_roundtrip_accepts_prefix() {
        let a = generate_keypair(seed(3)).address();
        assert_eq!(a.to_string().parse::<Address>().unwrap(), a);
        assert_eq!(Address::from_hex(&a.to_hex()).unwrap(), a);
        assert!("0x12".parse::<Address>().is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_for_arbitrary_messages(s in any::<[u8; 32]>(), msg in proptest::collection::vec(any::<u8>(), 0..256)) {
            let kp = generate_keypair(s);
            let sig = kp.sign(&msg);
            prop_assert!(verify(&msg, &sig, &kp.public_key));
        }

        #[test]
        fn single_bit_flip_breaks_verification(
            s in any::<[u8; 32]>(),
            msg in proptest::collection::vec(any::<u8>(), 1..64),
            which in 0usize..3,
            bit in any::<usize>(),
        ) {
            let kp = generate_keypair(s);
            let mut m = msg.clone();
            let mut sig = kp.sign(&msg);
            let mut pk = kp.public_key;
            match which {
                0 => { let b = bit % (m.len() * 8); m[b / 8] ^= 1 << (b % 8); }
                1 => { let b = bit % (SIGNATURE_LEN * 8); sig.0[b / 8] ^= 1 << (b % 8); }
                _ => { let b = bit % (PUBLIC_KEY_LEN * 8); pk.0[b / 8] ^= 1 << (b % 8); }
            }
            prop_assert!(!verify(&m, &sig, &pk));
        }
    }
}
