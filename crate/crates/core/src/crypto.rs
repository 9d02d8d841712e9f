// SPDX-License-Identifier: Apache-2.0

//! Suite-versioned cryptographic primitives.
//!
//! Suite `0x01` is Ed25519 (deterministic signatures, 32-byte keys, 64-byte
//! signatures) with SHA-256 as the hash. The suite byte travels with every
//! serialized key so that other suites can be added without changing any
//! document or file layout.

use std::fmt;
use std::sync::{Arc, Mutex};

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// The only suite implemented: Ed25519 + SHA-256.
pub const SUITE_ED25519_SHA256: u8 = 0x01;

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SECRET_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const DIGEST_LEN: usize = 32;
pub const UUID_LEN: usize = 16;
pub const NONCE_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("randomness source failed: {0}")]
    EntropyUnavailable(String),
    #[error("invalid key: {0}")]
    InvalidKey(String),
}

impl CryptoError {
    pub fn code(&self) -> &'static str {
        match self {
            CryptoError::EntropyUnavailable(_) => "EntropyUnavailable",
            CryptoError::InvalidKey(_) => "InvalidKey",
        }
    }
}

/// Source of randomness shared by every actor.
///
/// `Os` draws from the operating system CSPRNG. `Seeded` is a ChaCha20
/// stream used for reproducible scenario runs; clones share one stream.
#[derive(Clone, Default)]
pub enum Entropy {
    #[default]
    Os,
    Seeded(Arc<Mutex<ChaCha20Rng>>),
}

impl Entropy {
    pub fn os() -> Self {
        Entropy::Os
    }

    pub fn seeded(seed: u64) -> Self {
        Entropy::Seeded(Arc::new(Mutex::new(ChaCha20Rng::seed_from_u64(seed))))
    }

    /// `Some(seed)` gives a deterministic source, `None` the OS source.
    pub fn from_seed(seed: Option<u64>) -> Self {
        seed.map_or_else(Entropy::os, Entropy::seeded)
    }

    pub fn fill(&self, buf: &mut [u8]) -> Result<(), CryptoError> {
        match self {
            Entropy::Os => OsRng
                .try_fill_bytes(buf)
                .map_err(|e| CryptoError::EntropyUnavailable(e.to_string())),
            Entropy::Seeded(rng) => {
                let mut rng = rng
                    .lock()
                    .map_err(|_| CryptoError::EntropyUnavailable("seeded source poisoned".into()))?;
                rng.fill_bytes(buf);
                Ok(())
            }
        }
    }

    fn array<const N: usize>(&self) -> Result<[u8; N], CryptoError> {
        let mut out = [0u8; N];
        self.fill(&mut out)?;
        Ok(out)
    }
}

impl fmt::Debug for Entropy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entropy::Os => f.write_str("Entropy::Os"),
            Entropy::Seeded(_) => f.write_str("Entropy::Seeded"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey {
    suite_id: u8,
    bytes: [u8; PUBLIC_KEY_LEN],
}

impl PublicKey {
    pub fn from_bytes(suite_id: u8, bytes: &[u8]) -> Result<Self, CryptoError> {
        check_suite(suite_id)?;
        let bytes: [u8; PUBLIC_KEY_LEN] = bytes.try_into().map_err(|_| {
            CryptoError::InvalidKey(format!("public key must be {PUBLIC_KEY_LEN} bytes, got {}", bytes.len()))
        })?;
        Ok(PublicKey { suite_id, bytes })
    }

    pub fn suite_id(&self) -> u8 {
        self.suite_id
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.bytes
    }

    /// Suite byte followed by the raw key, as stored in documents and `.tltpub` files.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + PUBLIC_KEY_LEN);
        out.push(self.suite_id);
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn from_wire(wire: &[u8]) -> Result<Self, CryptoError> {
        match wire.split_first() {
            Some((&suite, rest)) => PublicKey::from_bytes(suite, rest),
            None => Err(CryptoError::InvalidKey("empty public key".into())),
        }
    }

    /// 16-byte identifier used as the signer hint for signatures by this key.
    pub fn key_id(&self) -> [u8; 16] {
        let d = hash(&self.to_wire());
        let mut id = [0u8; 16];
        id.copy_from_slice(&d.as_bytes()[..16]);
        id
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({:02x}:{})", self.suite_id, hex::encode(self.bytes))
    }
}

/// Signing secret. Only leaves memory through explicit key-file export.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey {
    suite_id: u8,
    bytes: [u8; SECRET_KEY_LEN],
}

impl SecretKey {
    pub fn from_bytes(suite_id: u8, bytes: &[u8]) -> Result<Self, CryptoError> {
        check_suite(suite_id)?;
        let bytes: [u8; SECRET_KEY_LEN] = bytes.try_into().map_err(|_| {
            CryptoError::InvalidKey(format!("secret key must be {SECRET_KEY_LEN} bytes, got {}", bytes.len()))
        })?;
        Ok(SecretKey { suite_id, bytes })
    }

    pub fn suite_id(&self) -> u8 {
        self.suite_id
    }

    pub fn public_key(&self) -> PublicKey {
        let vk = SigningKey::from_bytes(&self.bytes).verifying_key();
        PublicKey { suite_id: self.suite_id, bytes: vk.to_bytes() }
    }

    /// `.tltkey` file contents: suite byte then raw key bytes.
    pub fn export(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + SECRET_KEY_LEN);
        out.push(self.suite_id);
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn import(file: &[u8]) -> Result<Self, CryptoError> {
        match file.split_first() {
            Some((&suite, rest)) => SecretKey::from_bytes(suite, rest),
            None => Err(CryptoError::InvalidKey("empty key file".into())),
        }
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey({:02x}:<redacted>)", self.suite_id)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature([u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Signature)
    }

    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }
}

impl From<[u8; SIGNATURE_LEN]> for Signature {
    fn from(b: [u8; SIGNATURE_LEN]) -> Self {
        Signature(b)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(self.0))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Digest)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl From<[u8; DIGEST_LEN]> for Digest {
    fn from(b: [u8; DIGEST_LEN]) -> Self {
        Digest(b)
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

/// RFC 4122 version-4 UUID.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Uuid([u8; UUID_LEN]);

impl Uuid {
    /// Accepts only byte strings with the v4 version nibble and RFC 4122 variant.
    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let b: [u8; UUID_LEN] = bytes.try_into().ok()?;
        (b[6] >> 4 == 0x4 && b[8] >> 6 == 0b10).then_some(Uuid(b))
    }

    pub fn as_bytes(&self) -> &[u8; UUID_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        Uuid::from_bytes(&hex::decode(s).ok()?)
    }
}

impl fmt::Debug for Uuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Uuid({})", self.to_hex())
    }
}

impl fmt::Display for Uuid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nonce([u8; NONCE_LEN]);

impl Nonce {
    pub fn generate(entropy: &Entropy) -> Result<Self, CryptoError> {
        entropy.array().map(Nonce)
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Nonce)
    }

    pub fn as_bytes(&self) -> &[u8; NONCE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({})", hex::encode(self.0))
    }
}

fn check_suite(suite_id: u8) -> Result<(), CryptoError> {
    if suite_id == SUITE_ED25519_SHA256 {
        Ok(())
    } else {
        Err(CryptoError::InvalidKey(format!("unsupported suite 0x{suite_id:02x}")))
    }
}

pub fn generate_keypair(entropy: &Entropy) -> Result<(PublicKey, SecretKey), CryptoError> {
    let seed: [u8; SECRET_KEY_LEN] = entropy.array()?;
    let sk = SecretKey { suite_id: SUITE_ED25519_SHA256, bytes: seed };
    Ok((sk.public_key(), sk))
}

pub fn sign(sk: &SecretKey, msg: &[u8]) -> Result<Signature, CryptoError> {
    check_suite(sk.suite_id)?;
    let key = SigningKey::from_bytes(&sk.bytes);
    Ok(Signature(key.sign(msg).to_bytes()))
}

/// Malformed keys and signatures verify as `false`.
pub fn verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    if pk.suite_id != SUITE_ED25519_SHA256 {
        return false;
    }
    let Ok(vk) = VerifyingKey::from_bytes(&pk.bytes) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify_strict(msg, &sig).is_ok()
}

pub fn hash(msg: &[u8]) -> Digest {
    Digest(Sha256::digest(msg).into())
}

/// `hash(prev ∥ data)`; order-sensitive when folded.
pub fn extend_digest(prev: &Digest, data: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(prev.0);
    h.update(data);
    Digest(h.finalize().into())
}

pub fn random_bytes(entropy: &Entropy, n: usize) -> Result<Vec<u8>, CryptoError> {
    let mut out = vec![0u8; n];
    entropy.fill(&mut out)?;
    Ok(out)
}

pub fn generate_uuid(entropy: &Entropy) -> Result<Uuid, CryptoError> {
    let mut b: [u8; UUID_LEN] = entropy.array()?;
    b[6] = (b[6] & 0x0f) | 0x40;
    b[8] = (b[8] & 0x3f) | 0x80;
    Ok(Uuid(b))
}
