// SPDX-License-Identifier: Apache-2.0

//! Simulated constrained device.
//!
//! The device keeps only what it needs to attest: its identity and key, the
//! digest of its certificate, a copy of the root certificate, digests of
//! documents it has verified, and the full installation and configuration
//! proofs that feed the state digest.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::crypto::{
    self, CryptoError, Digest, Entropy, Nonce, PublicKey, SecretKey, Signature, Uuid, DIGEST_LEN, NONCE_LEN,
    SIGNATURE_LEN,
};
use crate::document::{
    self, make_device_certificate, make_installation, verify_chain, ChainError, ConfigurationDocument,
    DeviceCertificate, Document, DocumentError, FirmwareDocument, InstallationDocument, ManufacturerCertificate,
    RootCertificate,
};
use crate::transport::AdvertisingFrame;

pub const RESPONSE_LEN: usize = DIGEST_LEN + 2 * NONCE_LEN + SIGNATURE_LEN;
const SIGNED_LEN: usize = DIGEST_LEN + 2 * NONCE_LEN;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Document(#[from] DocumentError),
    #[error("chain verification failed: {0}")]
    ChainInvalid(#[from] ChainError),
    #[error("firmware image digest does not match the signed firmware document")]
    ImageMismatch,
    #[error("device is not operational ({0})")]
    NotOperational(BootStatus),
    #[error("configuration seq {offered} is not greater than current seq {current}")]
    StaleSequence { current: u64, offered: u64 },
    #[error("malformed device state: {0}")]
    MalformedState(String),
}

impl DeviceError {
    pub fn code(&self) -> &'static str {
        match self {
            DeviceError::Crypto(e) => e.code(),
            DeviceError::Document(e) => e.code(),
            DeviceError::ChainInvalid(_) => "ChainInvalid",
            DeviceError::ImageMismatch => "ImageMismatch",
            DeviceError::NotOperational(_) => "NotOperational",
            DeviceError::StaleSequence { .. } => "StaleSequence",
            DeviceError::MalformedState(_) => "MalformedState",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootStatus {
    Unprogrammed,
    Operational,
    IntegrityFailed,
}

impl BootStatus {
    fn to_byte(self) -> u8 {
        match self {
            BootStatus::Unprogrammed => 0,
            BootStatus::Operational => 1,
            BootStatus::IntegrityFailed => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(BootStatus::Unprogrammed),
            1 => Some(BootStatus::Operational),
            2 => Some(BootStatus::IntegrityFailed),
            _ => None,
        }
    }
}

impl fmt::Display for BootStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BootStatus::Unprogrammed => "unprogrammed",
            BootStatus::Operational => "operational",
            BootStatus::IntegrityFailed => "integrity_failed",
        })
    }
}

/// Hash over the canonical installation proof followed by the canonical
/// configuration proof; the key for state records in the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateDigest(pub Digest);

impl StateDigest {
    pub fn compute(inst: &InstallationDocument, cfg: Option<&ConfigurationDocument>) -> Self {
        StateDigest(document::state_digest(inst, cfg))
    }
}

impl fmt::Display for StateDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareSlot {
    pub installation: InstallationDocument,
    pub fw_doc_digest: Digest,
    /// Digest of the image as verified at install time.
    pub image_digest: Digest,
}

/// Signed attestation: `state_digest ∥ challenge ∥ device_nonce ∥ signature`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseMessage {
    pub state_digest: Digest,
    pub challenge: Nonce,
    pub device_nonce: Nonce,
    pub signature: Signature,
}

impl ResponseMessage {
    pub fn signed_bytes(&self) -> [u8; SIGNED_LEN] {
        signed_part(&self.state_digest, &self.challenge, &self.device_nonce)
    }

    pub fn to_bytes(&self) -> [u8; RESPONSE_LEN] {
        let mut out = [0u8; RESPONSE_LEN];
        out[..SIGNED_LEN].copy_from_slice(&self.signed_bytes());
        out[SIGNED_LEN..].copy_from_slice(self.signature.as_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != RESPONSE_LEN {
            return None;
        }
        Some(ResponseMessage {
            state_digest: Digest::from_bytes(&b[..DIGEST_LEN])?,
            challenge: Nonce::from_bytes(&b[DIGEST_LEN..DIGEST_LEN + NONCE_LEN])?,
            device_nonce: Nonce::from_bytes(&b[DIGEST_LEN + NONCE_LEN..SIGNED_LEN])?,
            signature: Signature::from_bytes(&b[SIGNED_LEN..])?,
        })
    }

    pub fn verifies_under(&self, pk: &PublicKey) -> bool {
        crypto::verify(pk, &self.signed_bytes(), &self.signature)
    }
}

fn signed_part(state: &Digest, challenge: &Nonce, device_nonce: &Nonce) -> [u8; SIGNED_LEN] {
    let mut out = [0u8; SIGNED_LEN];
    out[..DIGEST_LEN].copy_from_slice(state.as_bytes());
    out[DIGEST_LEN..DIGEST_LEN + NONCE_LEN].copy_from_slice(challenge.as_bytes());
    out[DIGEST_LEN + NONCE_LEN..].copy_from_slice(device_nonce.as_bytes());
    out
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    uuid: Uuid,
    public_key: PublicKey,
    secret_key: SecretKey,
    cert_digest: Digest,
    trusted_root: RootCertificate,
    verified_digests: BTreeSet<Digest>,
    fw_slot: Option<FirmwareSlot>,
    /// Measurement of whatever image is actually in flash.
    flash_digest: Option<Digest>,
    cfg: Option<ConfigurationDocument>,
    boot_status: BootStatus,
}

/// Provisions a new device: fresh UUID and keypair, bound into a
/// certificate signed by `mfr`.
pub fn device_birth(
    mfr: &ManufacturerCertificate,
    mfr_sk: &SecretKey,
    root: &RootCertificate,
    dinf: &str,
    entropy: &Entropy,
) -> Result<(DeviceState, DeviceCertificate), DeviceError> {
    verify_chain(&[mfr.document().clone()], root)?;
    let uuid = crypto::generate_uuid(entropy)?;
    let (public_key, secret_key) = crypto::generate_keypair(entropy)?;
    let dcrt = make_device_certificate(dinf, &public_key, uuid, mfr, mfr_sk)?;
    let state = DeviceState {
        uuid,
        public_key,
        secret_key,
        cert_digest: dcrt.digest(),
        trusted_root: root.clone(),
        verified_digests: BTreeSet::new(),
        fw_slot: None,
        flash_digest: None,
        cfg: None,
        boot_status: BootStatus::Unprogrammed,
    };
    Ok((state, dcrt))
}

impl DeviceState {
    pub fn uuid(&self) -> Uuid {
        self.uuid
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public_key
    }

    pub fn cert_digest(&self) -> &Digest {
        &self.cert_digest
    }

    pub fn trusted_root(&self) -> &RootCertificate {
        &self.trusted_root
    }

    pub fn verified_digests(&self) -> &BTreeSet<Digest> {
        &self.verified_digests
    }

    pub fn fw_slot(&self) -> Option<&FirmwareSlot> {
        self.fw_slot.as_ref()
    }

    pub fn configuration(&self) -> Option<&ConfigurationDocument> {
        self.cfg.as_ref()
    }

    pub fn boot_status(&self) -> BootStatus {
        self.boot_status
    }

    /// Stores `hash(doc)` once `doc : chain` verifies against the trusted root.
    pub fn remember_digest(&mut self, doc: &Document, chain: &[Document]) -> Result<Digest, DeviceError> {
        let mut full = Vec::with_capacity(chain.len() + 1);
        full.push(doc.clone());
        full.extend_from_slice(chain);
        verify_chain(&full, &self.trusted_root)?;
        let digest = doc.digest();
        self.verified_digests.insert(digest);
        Ok(digest)
    }

    /// Verifies and installs firmware, returning the signed installation proof.
    /// `chain` links `fw_doc` to the trusted root (normally `[mcrt]`).
    pub fn install_firmware(
        &mut self,
        fw_doc: &FirmwareDocument,
        fw_image: &[u8],
        chain: &[Document],
        instinfo: &str,
    ) -> Result<InstallationDocument, DeviceError> {
        let mut full = Vec::with_capacity(chain.len() + 1);
        full.push(fw_doc.document().clone());
        full.extend_from_slice(chain);
        verify_chain(&full, &self.trusted_root)?;

        let image_digest = crypto::hash(fw_image);
        if image_digest != *fw_doc.image_digest() {
            return Err(DeviceError::ImageMismatch);
        }

        let inst = make_installation(fw_doc, self.uuid, instinfo, &self.secret_key)?;
        let fw_doc_digest = fw_doc.digest();
        self.verified_digests.insert(fw_doc_digest);
        self.fw_slot = Some(FirmwareSlot { installation: inst.clone(), fw_doc_digest, image_digest });
        self.flash_digest = Some(image_digest);
        self.boot_status = BootStatus::Operational;
        Ok(inst)
    }

    pub fn apply_configuration(&mut self, cfg_payload: &[u8], seq: u64) -> Result<ConfigurationDocument, DeviceError> {
        self.require_operational()?;
        let current = self.cfg.as_ref().map_or(0, ConfigurationDocument::seq);
        if seq <= current {
            return Err(DeviceError::StaleSequence { current, offered: seq });
        }
        let cfg = document::make_configuration(cfg_payload, self.uuid, seq, &self.secret_key)?;
        self.cfg = Some(cfg.clone());
        Ok(cfg)
    }

    pub fn compute_state_digest(&self) -> Result<StateDigest, DeviceError> {
        self.require_operational()?;
        let slot = self.fw_slot.as_ref().ok_or(DeviceError::NotOperational(self.boot_status))?;
        Ok(StateDigest::compute(&slot.installation, self.cfg.as_ref()))
    }

    pub fn advertise(&self) -> AdvertisingFrame {
        AdvertisingFrame { flags: 0, uuid: self.uuid }
    }

    pub fn handle_challenge(&self, challenge: &Nonce, entropy: &Entropy) -> Result<ResponseMessage, DeviceError> {
        let state = self.compute_state_digest()?;
        let device_nonce = Nonce::generate(entropy)?;
        let signature = crypto::sign(&self.secret_key, &signed_part(&state.0, challenge, &device_nonce))?;
        Ok(ResponseMessage { state_digest: state.0, challenge: *challenge, device_nonce, signature })
    }

    /// Simulated secure boot: re-measures flash and re-checks stored proofs.
    pub fn secure_boot(&mut self) -> BootStatus {
        self.boot_status = match &self.fw_slot {
            None => BootStatus::Unprogrammed,
            Some(slot) => {
                let inst = &slot.installation;
                let inst_ok = inst.uuid() == self.uuid
                    && inst.document().signature_valid(0, &self.public_key)
                    && *inst.fw_doc_digest() == slot.fw_doc_digest
                    && self.verified_digests.contains(&slot.fw_doc_digest);
                let flash_ok = self.flash_digest == Some(slot.image_digest);
                let cfg_ok = self
                    .cfg
                    .as_ref()
                    .is_none_or(|c| c.uuid() == self.uuid && c.document().signature_valid(0, &self.public_key));
                if inst_ok && flash_ok && cfg_ok {
                    BootStatus::Operational
                } else {
                    BootStatus::IntegrityFailed
                }
            }
        };
        self.boot_status
    }

    /// Writes an image straight to flash, bypassing verification. Models a
    /// physical reprogramming attack; takes effect at the next secure boot.
    pub fn overwrite_flash(&mut self, image: &[u8]) {
        self.flash_digest = Some(crypto::hash(image));
    }

    fn require_operational(&self) -> Result<(), DeviceError> {
        match self.boot_status {
            BootStatus::Operational => Ok(()),
            other => Err(DeviceError::NotOperational(other)),
        }
    }

    /// Copy of the device key, for writing its `.tltkey` file.
    pub fn export_secret_key(&self) -> SecretKey {
        self.secret_key.clone()
    }

    /// `.tltdev` contents: every field except the secret key, which is
    /// referenced by `key_ref` and kept in a separate `.tltkey` file.
    pub fn encode_state(&self, key_ref: &str) -> Vec<u8> {
        let mut w = StateWriter::default();
        w.field(state_tag::UUID, self.uuid.as_bytes());
        w.field(state_tag::PUBLIC_KEY, &self.public_key.to_wire());
        w.field(state_tag::CERT_DIGEST, self.cert_digest.as_bytes());
        w.field(state_tag::ROOT, &self.trusted_root.encode());
        let digests: Vec<u8> = self.verified_digests.iter().flat_map(|d| *d.as_bytes()).collect();
        w.field(state_tag::VERIFIED, &digests);
        if let Some(slot) = &self.fw_slot {
            w.field(state_tag::INSTALLATION, &slot.installation.encode());
            w.field(state_tag::FW_DOC_DIGEST, slot.fw_doc_digest.as_bytes());
            w.field(state_tag::IMAGE_DIGEST, slot.image_digest.as_bytes());
        }
        if let Some(flash) = &self.flash_digest {
            w.field(state_tag::FLASH_DIGEST, flash.as_bytes());
        }
        if let Some(cfg) = &self.cfg {
            w.field(state_tag::CONFIGURATION, &cfg.encode());
        }
        w.field(state_tag::BOOT_STATUS, &[self.boot_status.to_byte()]);
        w.field(state_tag::KEY_REF, key_ref.as_bytes());
        w.finish()
    }

    /// Restores a device from `.tltdev` bytes and its secret key. Returns the
    /// key reference recorded in the file.
    pub fn decode_state(bytes: &[u8], secret_key: SecretKey) -> Result<(DeviceState, String), DeviceError> {
        let bad = |m: &str| DeviceError::MalformedState(m.to_string());
        let fields = read_state_fields(bytes)?;
        let get = |tag: u8| fields.iter().find(|(t, _)| *t == tag).map(|(_, v)| v.as_slice());
        let need = |tag: u8, name: &str| get(tag).ok_or_else(|| bad(&format!("missing {name}")));
        let digest = |tag: u8, name: &str| -> Result<Digest, DeviceError> {
            Digest::from_bytes(need(tag, name)?).ok_or_else(|| bad(&format!("bad {name}")))
        };

        let uuid = Uuid::from_bytes(need(state_tag::UUID, "uuid")?).ok_or_else(|| bad("bad uuid"))?;
        let public_key = PublicKey::from_wire(need(state_tag::PUBLIC_KEY, "public key")?)?;
        if secret_key.public_key() != public_key {
            return Err(CryptoError::InvalidKey("key file does not belong to this device".into()).into());
        }
        let trusted_root = RootCertificate::decode(need(state_tag::ROOT, "root")?)?;
        let verified_raw = need(state_tag::VERIFIED, "verified digests")?;
        if verified_raw.len() % DIGEST_LEN != 0 {
            return Err(bad("verified digest list length"));
        }
        let verified_digests = verified_raw
            .chunks_exact(DIGEST_LEN)
            .map(|c| Digest::from_bytes(c).expect("32-byte chunk"))
            .collect();
        let fw_slot = match get(state_tag::INSTALLATION) {
            Some(raw) => Some(FirmwareSlot {
                installation: InstallationDocument::decode(raw)?,
                fw_doc_digest: digest(state_tag::FW_DOC_DIGEST, "firmware document digest")?,
                image_digest: digest(state_tag::IMAGE_DIGEST, "image digest")?,
            }),
            None => None,
        };
        let flash_digest = get(state_tag::FLASH_DIGEST)
            .map(|v| Digest::from_bytes(v).ok_or_else(|| bad("bad flash digest")))
            .transpose()?;
        let cfg = get(state_tag::CONFIGURATION).map(ConfigurationDocument::decode).transpose()?;
        let boot_status = need(state_tag::BOOT_STATUS, "boot status")?
            .first()
            .copied()
            .and_then(BootStatus::from_byte)
            .ok_or_else(|| bad("bad boot status"))?;
        let key_ref = String::from_utf8(need(state_tag::KEY_REF, "key reference")?.to_vec())
            .map_err(|_| bad("key reference is not UTF-8"))?;

        let state = DeviceState {
            uuid,
            public_key,
            secret_key,
            cert_digest: digest(state_tag::CERT_DIGEST, "certificate digest")?,
            trusted_root,
            verified_digests,
            fw_slot,
            flash_digest,
            cfg,
            boot_status,
        };
        Ok((state, key_ref))
    }
}

const STATE_MAGIC: &[u8; 7] = b"TLTDEV\x01";

mod state_tag {
    pub const UUID: u8 = 0x01;
    pub const PUBLIC_KEY: u8 = 0x02;
    pub const CERT_DIGEST: u8 = 0x03;
    pub const ROOT: u8 = 0x04;
    pub const VERIFIED: u8 = 0x05;
    pub const INSTALLATION: u8 = 0x06;
    pub const FW_DOC_DIGEST: u8 = 0x07;
    pub const IMAGE_DIGEST: u8 = 0x08;
    pub const FLASH_DIGEST: u8 = 0x09;
    pub const CONFIGURATION: u8 = 0x0a;
    pub const BOOT_STATUS: u8 = 0x0b;
    pub const KEY_REF: u8 = 0x0c;
}

#[derive(Default)]
struct StateWriter(Vec<u8>);

impl StateWriter {
    fn field(&mut self, tag: u8, value: &[u8]) {
        if self.0.is_empty() {
            self.0.extend_from_slice(STATE_MAGIC);
        }
        self.0.push(tag);
        self.0.extend_from_slice(&(value.len() as u32).to_be_bytes());
        self.0.extend_from_slice(value);
    }

    fn finish(self) -> Vec<u8> {
        self.0
    }
}

fn read_state_fields(bytes: &[u8]) -> Result<Vec<(u8, Vec<u8>)>, DeviceError> {
    let bad = |m: &str| DeviceError::MalformedState(m.to_string());
    let mut rest = bytes.strip_prefix(STATE_MAGIC.as_slice()).ok_or_else(|| bad("missing TLTDEV header"))?;
    let mut out: Vec<(u8, Vec<u8>)> = Vec::new();
    while !rest.is_empty() {
        if rest.len() < 5 {
            return Err(bad("truncated field header"));
        }
        let tag = rest[0];
        let len = u32::from_be_bytes([rest[1], rest[2], rest[3], rest[4]]) as usize;
        rest = &rest[5..];
        if len > rest.len() {
            return Err(bad("field overruns input"));
        }
        if out.last().is_some_and(|(t, _)| *t >= tag) {
            return Err(bad("field tags out of order"));
        }
        out.push((tag, rest[..len].to_vec()));
        rest = &rest[len..];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{make_manufacturer_certificate, make_root_certificate, sign_firmware, verify_installation};
    use std::collections::HashSet;

    struct Fixture {
        e: Entropy,
        root: RootCertificate,
        mfr: ManufacturerCertificate,
        mfr_sk: SecretKey,
    }

    fn fixture(seed: u64) -> Fixture {
        let e = Entropy::seeded(seed);
        let (apk, ask) = crypto::generate_keypair(&e).unwrap();
        let root = make_root_certificate("authority", &apk, &ask).unwrap();
        let (mpk, msk) = crypto::generate_keypair(&e).unwrap();
        let mfr = make_manufacturer_certificate("Acme", &mpk, &ask, &e).unwrap();
        Fixture { e, root, mfr, mfr_sk: msk }
    }

    impl Fixture {
        fn born(&self) -> (DeviceState, DeviceCertificate) {
            device_birth(&self.mfr, &self.mfr_sk, &self.root, "lock L2", &self.e).unwrap()
        }

        fn firmware(&self, image: &[u8], meta: &str) -> FirmwareDocument {
            sign_firmware(image, meta, &self.mfr_sk, &self.mfr).unwrap()
        }

        fn chain(&self) -> Vec<Document> {
            vec![self.mfr.document().clone()]
        }

        fn operational(&self) -> (DeviceState, DeviceCertificate) {
            let (mut dev, dcrt) = self.born();
            let fw = self.firmware(b"image-1", "v1");
            dev.install_firmware(&fw, b"image-1", &self.chain(), "slot=0").unwrap();
            (dev, dcrt)
        }
    }

    #[test]
    fn birth_produces_chained_certificate() {
        let f = fixture(1);
        let (dev, dcrt) = f.born();
        let chain = [dcrt.document().clone(), f.mfr.document().clone(), f.root.document().clone()];
        assert!(verify_chain(&chain, &f.root).is_ok());
        assert_eq!(*dev.cert_digest(), crypto::hash(&dcrt.encode()));
        assert_eq!(dev.boot_status(), BootStatus::Unprogrammed);
        assert_eq!(dev.uuid(), dcrt.uuid());
        assert_eq!(dev.public_key(), dcrt.device_pk());
    }

    #[test]
    fn births_are_distinct() {
        let f = fixture(2);
        let mut uuids = HashSet::new();
        let mut keys = HashSet::new();
        for _ in 0..50 {
            let (dev, _) = f.born();
            assert!(uuids.insert(dev.uuid()));
            assert!(keys.insert(*dev.public_key()));
        }
    }

    #[test]
    fn birth_under_foreign_manufacturer_is_chain_invalid() {
        let f = fixture(3);
        let other = fixture(4);
        let err = device_birth(&other.mfr, &other.mfr_sk, &f.root, "x", &f.e).unwrap_err();
        assert_eq!(err.code(), "ChainInvalid");
    }

    #[test]
    fn remember_digest_only_for_verified_documents() {
        let f = fixture(5);
        let (mut dev, _) = f.born();
        let fw = f.firmware(b"img", "v1");
        let d = dev.remember_digest(fw.document(), &f.chain()).unwrap();
        assert!(dev.verified_digests().contains(&d));
        dev.remember_digest(fw.document(), &f.chain()).unwrap();
        assert_eq!(dev.verified_digests().len(), 1);

        let mut bytes = fw.encode();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        let corrupted = Document::decode(&bytes).unwrap();
        let before = dev.verified_digests().clone();
        assert_eq!(dev.remember_digest(&corrupted, &f.chain()).unwrap_err().code(), "ChainInvalid");
        assert_eq!(*dev.verified_digests(), before);
    }

    #[test]
    fn install_happy_path_verifies() {
        let f = fixture(6);
        let (mut dev, dcrt) = f.born();
        let fw = f.firmware(b"image-1", "v1");
        let inst = dev.install_firmware(&fw, b"image-1", &f.chain(), "slot=0").unwrap();
        assert!(verify_installation(&inst, &dcrt, &fw));
        assert_eq!(dev.boot_status(), BootStatus::Operational);
        assert!(dev.verified_digests().contains(&fw.digest()));
        assert_eq!(inst.instinfo(), "slot=0");
    }

    #[test]
    fn impostor_firmware_is_refused() {
        let f = fixture(7);
        let rogue = fixture(8);
        let (mut dev, _) = f.born();
        let fw = rogue.firmware(b"evil", "v666");
        let err = dev.install_firmware(&fw, b"evil", &rogue.chain(), "slot=0").unwrap_err();
        assert_eq!(err.code(), "ChainInvalid");
        assert!(dev.fw_slot().is_none());
        assert_eq!(dev.boot_status(), BootStatus::Unprogrammed);
    }

    #[test]
    fn tampered_image_is_image_mismatch() {
        let f = fixture(9);
        let (mut dev, _) = f.born();
        let fw = f.firmware(b"image-1", "v1");
        assert!(matches!(
            dev.install_firmware(&fw, b"image-2", &f.chain(), "slot=0"),
            Err(DeviceError::ImageMismatch)
        ));
    }

    #[test]
    fn corrupted_installs_never_touch_the_slot() {
        let f = fixture(10);
        let (mut dev, _) = f.operational();
        let slot = dev.fw_slot().cloned();
        let fw = f.firmware(b"image-2", "v2");
        let bytes = fw.encode();
        for i in 0..100 {
            let mut b = bytes.clone();
            let idx = (i * 37) % b.len();
            b[idx] ^= 1 << (i % 8);
            let Ok(doc) = FirmwareDocument::decode(&b) else { continue };
            assert!(dev.install_firmware(&doc, b"image-2", &f.chain(), "slot=1").is_err(), "mutation {i}");
            assert_eq!(dev.fw_slot().cloned(), slot);
        }
    }

    #[test]
    fn configuration_sequence_is_monotone() {
        let f = fixture(11);
        let (mut dev, _) = f.born();
        assert_eq!(dev.apply_configuration(b"x", 1).unwrap_err().code(), "NotOperational");
        let (mut dev, dcrt) = f.operational();
        let before = dev.compute_state_digest().unwrap();
        let cfg = dev.apply_configuration(b"mode=eco", 1).unwrap();
        assert_eq!(*cfg.cfg_digest(), crypto::hash(b"mode=eco"));
        assert!(document::verify_configuration(&cfg, &dcrt));
        assert_ne!(dev.compute_state_digest().unwrap(), before);
        dev.apply_configuration(b"mode=boost", 2).unwrap();
        assert!(matches!(
            dev.apply_configuration(b"mode=eco", 1),
            Err(DeviceError::StaleSequence { current: 2, offered: 1 })
        ));
    }

    #[test]
    fn state_digest_definition() {
        let f = fixture(12);
        let (mut dev, _) = f.operational();
        let inst = dev.fw_slot().unwrap().installation.clone();
        let d1 = dev.compute_state_digest().unwrap();
        assert_eq!(d1, dev.compute_state_digest().unwrap());
        assert_eq!(d1.0.as_bytes().len(), 32);

        let mut cat = inst.encode();
        cat.extend_from_slice(&document::empty_configuration(dev.uuid()).encode());
        assert_eq!(d1.0, crypto::hash(&cat));

        let cfg = dev.apply_configuration(b"c", 1).unwrap();
        let mut cat = inst.encode();
        cat.extend_from_slice(&cfg.encode());
        assert_eq!(dev.compute_state_digest().unwrap().0, crypto::hash(&cat));
    }

    #[test]
    fn state_sensitivity_across_firmware_and_config() {
        let f = fixture(13);
        let (mut dev, _) = f.born();
        let mut seen = HashSet::new();
        let mut seq = 0;
        for v in 0..3 {
            let image = format!("image-{v}");
            let fw = f.firmware(image.as_bytes(), &format!("v{v}"));
            dev.install_firmware(&fw, image.as_bytes(), &f.chain(), "slot=0").unwrap();
            assert!(seen.insert(dev.compute_state_digest().unwrap()));
            for c in 0..3 {
                seq += 1;
                dev.apply_configuration(format!("cfg-{c}").as_bytes(), seq).unwrap();
                assert!(seen.insert(dev.compute_state_digest().unwrap()));
            }
        }
    }

    #[test]
    fn advertisement_carries_uuid() {
        let f = fixture(14);
        let (a, _) = f.born();
        let (b, _) = f.born();
        let frame = a.advertise().encode();
        assert_eq!(frame.len(), 19);
        assert_eq!(crate::transport::parse_advertisement(&frame).unwrap(), a.uuid());
        assert_ne!(a.advertise().uuid, b.advertise().uuid);
    }

    #[test]
    fn challenge_response_contract() {
        let f = fixture(15);
        let (dev, _) = f.born();
        let ch = Nonce::generate(&f.e).unwrap();
        assert_eq!(dev.handle_challenge(&ch, &f.e).unwrap_err().code(), "NotOperational");

        let (dev, dcrt) = f.operational();
        let resp = dev.handle_challenge(&ch, &f.e).unwrap();
        let bytes = resp.to_bytes();
        assert_eq!(bytes.len(), 128);
        assert_eq!(&bytes[32..48], ch.as_bytes());
        assert!(resp.verifies_under(dcrt.device_pk()));
        assert!(crypto::verify(dcrt.device_pk(), &bytes[..64], &Signature::from_bytes(&bytes[64..]).unwrap()));
        assert_eq!(resp.state_digest, dev.compute_state_digest().unwrap().0);
        assert_eq!(ResponseMessage::from_bytes(&bytes), Some(resp));
    }

    #[test]
    fn responses_are_fresh() {
        let f = fixture(16);
        let (dev, _) = f.operational();
        let ch = Nonce::generate(&f.e).unwrap();
        let mut nonces = HashSet::new();
        let mut sigs = HashSet::new();
        for _ in 0..1000 {
            let r = dev.handle_challenge(&ch, &f.e).unwrap();
            nonces.insert(r.device_nonce);
            sigs.insert(r.signature);
        }
        assert_eq!((nonces.len(), sigs.len()), (1000, 1000));
    }

    #[test]
    fn secure_boot_detects_flash_overwrite() {
        let f = fixture(17);
        let (mut dev, _) = f.operational();
        assert_eq!(dev.secure_boot(), BootStatus::Operational);
        dev.overwrite_flash(b"backdoored image");
        assert_eq!(dev.secure_boot(), BootStatus::IntegrityFailed);
        let ch = Nonce::generate(&f.e).unwrap();
        assert_eq!(dev.handle_challenge(&ch, &f.e).unwrap_err().code(), "NotOperational");
    }

    #[test]
    fn state_file_round_trip() {
        let f = fixture(18);
        let (mut dev, _) = f.operational();
        dev.apply_configuration(b"c", 3).unwrap();
        let bytes = dev.encode_state("dev.tltkey");
        let (back, key_ref) = DeviceState::decode_state(&bytes, dev.secret_key.clone()).unwrap();
        assert_eq!(key_ref, "dev.tltkey");
        assert_eq!(back.encode_state("dev.tltkey"), bytes);
        assert_eq!(back.compute_state_digest().unwrap(), dev.compute_state_digest().unwrap());

        let (_, wrong) = crypto::generate_keypair(&f.e).unwrap();
        assert_eq!(DeviceState::decode_state(&bytes, wrong).unwrap_err().code(), "InvalidKey");
        assert!(DeviceState::decode_state(&bytes[..bytes.len() - 3], dev.secret_key.clone()).is_err());
        // the secret key never appears in the state file
        let sk = dev.secret_key.export();
        assert!(!bytes.windows(32).any(|w| w == &sk[1..]));
    }
}
