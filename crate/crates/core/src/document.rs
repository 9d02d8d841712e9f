// SPDX-License-Identifier: Apache-2.0

//! Canonical signed documents and chain verification.
//!
//! Wire layout of a document:
//!
//! ```text
//! doc_type (1) | field_count (1) | { tag (1) | len (4, BE) | value }* | { signer_hint (16) | sig (64) }*
//! ```
//!
//! Field tags are strictly ascending. Signatures occupy the remainder of the
//! buffer, so its length after the last field must be a multiple of 80.
//! Signature `i` covers the encoding of the document carrying only
//! signatures `0..i`.

use std::fmt;

use thiserror::Error;

use crate::crypto::{
    self, CryptoError, Digest, Entropy, PublicKey, SecretKey, Signature, Uuid, DIGEST_LEN, SIGNATURE_LEN,
    UUID_LEN,
};

pub const SIGNER_HINT_LEN: usize = 16;
pub const MFR_ID_LEN: usize = 16;
const SIGNATURE_ENTRY_LEN: usize = SIGNER_HINT_LEN + SIGNATURE_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DocType {
    Root = 0x01,
    Manufacturer = 0x02,
    Device = 0x03,
    Firmware = 0x04,
    Installation = 0x05,
    Configuration = 0x06,
}

impl DocType {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => DocType::Root,
            0x02 => DocType::Manufacturer,
            0x03 => DocType::Device,
            0x04 => DocType::Firmware,
            0x05 => DocType::Installation,
            0x06 => DocType::Configuration,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DocType::Root => "root",
            DocType::Manufacturer => "manufacturer",
            DocType::Device => "device",
            DocType::Firmware => "firmware",
            DocType::Installation => "installation",
            DocType::Configuration => "configuration",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            DocType::Root,
            DocType::Manufacturer,
            DocType::Device,
            DocType::Firmware,
            DocType::Installation,
            DocType::Configuration,
        ]
        .into_iter()
        .find(|t| t.name() == s)
    }
}

impl fmt::Display for DocType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Field tags, per document type.
pub mod tag {
    pub const ROOT_INFO: u8 = 0x01;
    pub const ROOT_PK: u8 = 0x02;

    pub const MFR_INFO: u8 = 0x01;
    pub const MFR_PK: u8 = 0x02;
    pub const MFR_ID: u8 = 0x03;

    pub const DEV_INFO: u8 = 0x01;
    pub const DEV_PK: u8 = 0x02;
    pub const DEV_UUID: u8 = 0x03;
    pub const DEV_MFR_ID: u8 = 0x04;

    pub const FW_META: u8 = 0x01;
    pub const FW_IMAGE_DIGEST: u8 = 0x02;
    pub const FW_MFR_ID: u8 = 0x03;

    pub const INST_FW_DOC_DIGEST: u8 = 0x01;
    pub const INST_UUID: u8 = 0x02;
    pub const INST_INFO: u8 = 0x03;

    pub const CFG_DIGEST: u8 = 0x01;
    pub const CFG_UUID: u8 = 0x02;
    pub const CFG_SEQ: u8 = 0x03;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DocumentError {
    #[error("field tags must be strictly ascending (tag 0x{0:02x})")]
    NonCanonicalField(u8),
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
}

impl DocumentError {
    pub fn code(&self) -> &'static str {
        match self {
            DocumentError::NonCanonicalField(_) => "NonCanonicalField",
            DocumentError::MalformedDocument(_) => "MalformedDocument",
            DocumentError::Crypto(e) => e.code(),
            DocumentError::ConstraintViolation(_) => "ConstraintViolation",
        }
    }
}

fn malformed(msg: impl Into<String>) -> DocumentError {
    DocumentError::MalformedDocument(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureEntry {
    pub signer_hint: [u8; SIGNER_HINT_LEN],
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    doc_type: DocType,
    fields: Vec<(u8, Vec<u8>)>,
    signatures: Vec<SignatureEntry>,
}

impl Document {
    pub fn new(doc_type: DocType, fields: Vec<(u8, Vec<u8>)>) -> Result<Self, DocumentError> {
        if fields.len() > u8::MAX as usize {
            return Err(malformed("more than 255 fields"));
        }
        for pair in fields.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(DocumentError::NonCanonicalField(pair[1].0));
            }
        }
        if fields.iter().any(|(_, v)| v.len() > u32::MAX as usize) {
            return Err(malformed("field value exceeds 4 GiB"));
        }
        Ok(Document { doc_type, fields, signatures: Vec::new() })
    }

    pub fn doc_type(&self) -> DocType {
        self.doc_type
    }

    pub fn fields(&self) -> &[(u8, Vec<u8>)] {
        &self.fields
    }

    pub fn field(&self, tag: u8) -> Option<&[u8]> {
        self.fields
            .binary_search_by_key(&tag, |(t, _)| *t)
            .ok()
            .map(|i| self.fields[i].1.as_slice())
    }

    pub fn signatures(&self) -> &[SignatureEntry] {
        &self.signatures
    }

    pub fn encode(&self) -> Vec<u8> {
        self.encode_prefix(self.signatures.len())
    }

    /// Encoding with only the first `n` signatures; the message signed by signature `n`.
    pub fn encode_prefix(&self, n: usize) -> Vec<u8> {
        let body: usize = self.fields.iter().map(|(_, v)| 5 + v.len()).sum();
        let mut out = Vec::with_capacity(2 + body + n * SIGNATURE_ENTRY_LEN);
        out.push(self.doc_type as u8);
        out.push(self.fields.len() as u8);
        for (tag, value) in &self.fields {
            out.push(*tag);
            out.extend_from_slice(&(value.len() as u32).to_be_bytes());
            out.extend_from_slice(value);
        }
        for entry in &self.signatures[..n] {
            out.extend_from_slice(&entry.signer_hint);
            out.extend_from_slice(entry.signature.as_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DocumentError> {
        let (&type_byte, rest) = bytes.split_first().ok_or_else(|| malformed("empty input"))?;
        let doc_type =
            DocType::from_byte(type_byte).ok_or_else(|| malformed(format!("unknown doc_type 0x{type_byte:02x}")))?;
        let (&count, mut rest) = rest.split_first().ok_or_else(|| malformed("truncated field count"))?;

        let mut fields: Vec<(u8, Vec<u8>)> = Vec::with_capacity(count as usize);
        for _ in 0..count {
            if rest.len() < 5 {
                return Err(malformed("truncated field header"));
            }
            let tag = rest[0];
            let len = u32::from_be_bytes([rest[1], rest[2], rest[3], rest[4]]) as usize;
            rest = &rest[5..];
            if len > rest.len() {
                return Err(malformed(format!("field 0x{tag:02x} length {len} overruns input")));
            }
            if fields.last().is_some_and(|(prev, _)| *prev >= tag) {
                return Err(malformed(format!("field tag 0x{tag:02x} out of order")));
            }
            fields.push((tag, rest[..len].to_vec()));
            rest = &rest[len..];
        }

        if rest.len() % SIGNATURE_ENTRY_LEN != 0 {
            return Err(malformed(format!("{} trailing bytes do not form whole signatures", rest.len())));
        }
        let signatures = rest
            .chunks_exact(SIGNATURE_ENTRY_LEN)
            .map(|c| {
                let mut signer_hint = [0u8; SIGNER_HINT_LEN];
                signer_hint.copy_from_slice(&c[..SIGNER_HINT_LEN]);
                let signature = Signature::from_bytes(&c[SIGNER_HINT_LEN..]).expect("64-byte chunk");
                SignatureEntry { signer_hint, signature }
            })
            .collect();

        Ok(Document { doc_type, fields, signatures })
    }

    /// Appends a signature over the current encoding (fields plus all earlier signatures).
    pub fn append_signature(&mut self, signer_hint: [u8; SIGNER_HINT_LEN], sk: &SecretKey) -> Result<(), CryptoError> {
        let signature = crypto::sign(sk, &self.encode())?;
        self.signatures.push(SignatureEntry { signer_hint, signature });
        Ok(())
    }

    /// Whether signature `index` verifies under `pk`.
    pub fn signature_valid(&self, index: usize, pk: &PublicKey) -> bool {
        self.signatures
            .get(index)
            .is_some_and(|entry| crypto::verify(pk, &self.encode_prefix(index), &entry.signature))
    }

    pub fn digest(&self) -> Digest {
        crypto::hash(&self.encode())
    }
}

fn text_field(doc: &Document, tag: u8) -> Result<String, DocumentError> {
    let raw = doc.field(tag).ok_or_else(|| malformed(format!("missing field 0x{tag:02x}")))?;
    String::from_utf8(raw.to_vec()).map_err(|_| malformed(format!("field 0x{tag:02x} is not UTF-8")))
}

fn key_field(doc: &Document, tag: u8) -> Result<PublicKey, DocumentError> {
    let raw = doc.field(tag).ok_or_else(|| malformed(format!("missing field 0x{tag:02x}")))?;
    PublicKey::from_wire(raw).map_err(|e| malformed(e.to_string()))
}

fn digest_field(doc: &Document, tag: u8) -> Result<Digest, DocumentError> {
    doc.field(tag)
        .and_then(Digest::from_bytes)
        .ok_or_else(|| malformed(format!("field 0x{tag:02x} must be a {DIGEST_LEN}-byte digest")))
}

fn uuid_field(doc: &Document, tag: u8) -> Result<Uuid, DocumentError> {
    doc.field(tag)
        .and_then(Uuid::from_bytes)
        .ok_or_else(|| malformed(format!("field 0x{tag:02x} must be a {UUID_LEN}-byte v4 UUID")))
}

fn mfr_id_field(doc: &Document, tag: u8) -> Result<[u8; MFR_ID_LEN], DocumentError> {
    doc.field(tag)
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| malformed(format!("field 0x{tag:02x} must be a {MFR_ID_LEN}-byte manufacturer id")))
}

fn expect_shape(doc: &Document, doc_type: DocType, tags: &[u8], signatures: usize) -> Result<(), DocumentError> {
    if doc.doc_type != doc_type {
        return Err(malformed(format!("expected {doc_type} document, got {}", doc.doc_type)));
    }
    if doc.fields.iter().map(|(t, _)| *t).ne(tags.iter().copied()) {
        return Err(malformed(format!("{doc_type} document has unexpected field set")));
    }
    if doc.signatures.len() != signatures {
        return Err(malformed(format!(
            "{doc_type} document carries {} signatures, expected {signatures}",
            doc.signatures.len()
        )));
    }
    Ok(())
}

macro_rules! typed_document {
    ($name:ident) => {
        impl $name {
            pub fn document(&self) -> &Document {
                &self.doc
            }

            pub fn encode(&self) -> Vec<u8> {
                self.doc.encode()
            }

            pub fn digest(&self) -> Digest {
                self.doc.digest()
            }

            pub fn decode(bytes: &[u8]) -> Result<Self, DocumentError> {
                Self::try_from(Document::decode(bytes)?)
            }
        }

        impl From<$name> for Document {
            fn from(d: $name) -> Document {
                d.doc
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootCertificate {
    doc: Document,
    info: String,
    authority_pk: PublicKey,
}

typed_document!(RootCertificate);

impl RootCertificate {
    pub fn info(&self) -> &str {
        &self.info
    }

    pub fn authority_pk(&self) -> &PublicKey {
        &self.authority_pk
    }

    pub fn self_verifies(&self) -> bool {
        self.doc.signatures[0].signer_hint == self.authority_pk.key_id() && self.doc.signature_valid(0, &self.authority_pk)
    }
}

impl TryFrom<Document> for RootCertificate {
    type Error = DocumentError;

    fn try_from(doc: Document) -> Result<Self, DocumentError> {
        expect_shape(&doc, DocType::Root, &[tag::ROOT_INFO, tag::ROOT_PK], 1)?;
        let info = text_field(&doc, tag::ROOT_INFO)?;
        let authority_pk = key_field(&doc, tag::ROOT_PK)?;
        Ok(RootCertificate { doc, info, authority_pk })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManufacturerCertificate {
    doc: Document,
    info: String,
    mfr_pk: PublicKey,
    mfr_id: [u8; MFR_ID_LEN],
}

typed_document!(ManufacturerCertificate);

impl ManufacturerCertificate {
    pub fn info(&self) -> &str {
        &self.info
    }

    pub fn mfr_pk(&self) -> &PublicKey {
        &self.mfr_pk
    }

    pub fn mfr_id(&self) -> &[u8; MFR_ID_LEN] {
        &self.mfr_id
    }
}

impl TryFrom<Document> for ManufacturerCertificate {
    type Error = DocumentError;

    fn try_from(doc: Document) -> Result<Self, DocumentError> {
        expect_shape(&doc, DocType::Manufacturer, &[tag::MFR_INFO, tag::MFR_PK, tag::MFR_ID], 1)?;
        Ok(ManufacturerCertificate {
            info: text_field(&doc, tag::MFR_INFO)?,
            mfr_pk: key_field(&doc, tag::MFR_PK)?,
            mfr_id: mfr_id_field(&doc, tag::MFR_ID)?,
            doc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceCertificate {
    doc: Document,
    dinf: String,
    device_pk: PublicKey,
    uuid: Uuid,
    mfr_id: [u8; MFR_ID_LEN],
}

typed_document!(DeviceCertificate);

impl DeviceCertificate {
    pub fn dinf(&self) -> &str {
        &self.dinf
    }

    pub fn device_pk(&self) -> &PublicKey {
        &self.device_pk
    }

    pub fn uuid(&self) -> Uuid {
        self.uuid
    }

    pub fn mfr_id(&self) -> &[u8; MFR_ID_LEN] {
        &self.mfr_id
    }
}

impl TryFrom<Document> for DeviceCertificate {
    type Error = DocumentError;

    fn try_from(doc: Document) -> Result<Self, DocumentError> {
        expect_shape(
            &doc,
            DocType::Device,
            &[tag::DEV_INFO, tag::DEV_PK, tag::DEV_UUID, tag::DEV_MFR_ID],
            1,
        )?;
        Ok(DeviceCertificate {
            dinf: text_field(&doc, tag::DEV_INFO)?,
            device_pk: key_field(&doc, tag::DEV_PK)?,
            uuid: uuid_field(&doc, tag::DEV_UUID)?,
            mfr_id: mfr_id_field(&doc, tag::DEV_MFR_ID)?,
            doc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareDocument {
    doc: Document,
    meta: String,
    image_digest: Digest,
    mfr_id: [u8; MFR_ID_LEN],
}

typed_document!(FirmwareDocument);

impl FirmwareDocument {
    pub fn meta(&self) -> &str {
        &self.meta
    }

    pub fn image_digest(&self) -> &Digest {
        &self.image_digest
    }

    pub fn mfr_id(&self) -> &[u8; MFR_ID_LEN] {
        &self.mfr_id
    }
}

impl TryFrom<Document> for FirmwareDocument {
    type Error = DocumentError;

    fn try_from(doc: Document) -> Result<Self, DocumentError> {
        expect_shape(&doc, DocType::Firmware, &[tag::FW_META, tag::FW_IMAGE_DIGEST, tag::FW_MFR_ID], 1)?;
        Ok(FirmwareDocument {
            meta: text_field(&doc, tag::FW_META)?,
            image_digest: digest_field(&doc, tag::FW_IMAGE_DIGEST)?,
            mfr_id: mfr_id_field(&doc, tag::FW_MFR_ID)?,
            doc,
        })
    }
}

/// Device-signed proof that a firmware document was installed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstallationDocument {
    doc: Document,
    fw_doc_digest: Digest,
    uuid: Uuid,
    instinfo: String,
}

typed_document!(InstallationDocument);

impl InstallationDocument {
    pub fn fw_doc_digest(&self) -> &Digest {
        &self.fw_doc_digest
    }

    pub fn uuid(&self) -> Uuid {
        self.uuid
    }

    pub fn instinfo(&self) -> &str {
        &self.instinfo
    }
}

impl TryFrom<Document> for InstallationDocument {
    type Error = DocumentError;

    fn try_from(doc: Document) -> Result<Self, DocumentError> {
        expect_shape(
            &doc,
            DocType::Installation,
            &[tag::INST_FW_DOC_DIGEST, tag::INST_UUID, tag::INST_INFO],
            1,
        )?;
        Ok(InstallationDocument {
            fw_doc_digest: digest_field(&doc, tag::INST_FW_DOC_DIGEST)?,
            uuid: uuid_field(&doc, tag::INST_UUID)?,
            instinfo: text_field(&doc, tag::INST_INFO)?,
            doc,
        })
    }
}

/// Device-signed configuration proof. The sequence-0 form is the unsigned
/// placeholder used in state digests before any configuration exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigurationDocument {
    doc: Document,
    cfg_digest: Digest,
    uuid: Uuid,
    seq: u64,
}

typed_document!(ConfigurationDocument);

impl ConfigurationDocument {
    pub fn cfg_digest(&self) -> &Digest {
        &self.cfg_digest
    }

    pub fn uuid(&self) -> Uuid {
        self.uuid
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn is_empty_placeholder(&self) -> bool {
        self.seq == 0
    }
}

impl TryFrom<Document> for ConfigurationDocument {
    type Error = DocumentError;

    fn try_from(doc: Document) -> Result<Self, DocumentError> {
        let seq_raw: [u8; 8] = doc
            .field(tag::CFG_SEQ)
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| malformed("configuration seq must be 8 bytes"))?;
        let seq = u64::from_be_bytes(seq_raw);
        let expected_signatures = usize::from(seq != 0);
        expect_shape(
            &doc,
            DocType::Configuration,
            &[tag::CFG_DIGEST, tag::CFG_UUID, tag::CFG_SEQ],
            expected_signatures,
        )?;
        Ok(ConfigurationDocument {
            cfg_digest: digest_field(&doc, tag::CFG_DIGEST)?,
            uuid: uuid_field(&doc, tag::CFG_UUID)?,
            seq,
            doc,
        })
    }
}

fn require_key_match(sk: &SecretKey, pk: &PublicKey, what: &str) -> Result<(), DocumentError> {
    if sk.public_key() == *pk {
        Ok(())
    } else {
        Err(CryptoError::InvalidKey(format!("secret key does not match {what}")).into())
    }
}

pub fn make_root_certificate(info: &str, pk: &PublicKey, sk: &SecretKey) -> Result<RootCertificate, DocumentError> {
    require_key_match(sk, pk, "authority public key")?;
    let mut doc = Document::new(
        DocType::Root,
        vec![(tag::ROOT_INFO, info.as_bytes().to_vec()), (tag::ROOT_PK, pk.to_wire())],
    )?;
    doc.append_signature(pk.key_id(), sk)?;
    RootCertificate::try_from(doc)
}

/// Registers a manufacturer key under the authority. A fresh random
/// `mfr_id` is assigned.
pub fn make_manufacturer_certificate(
    mfr_info: &str,
    mfr_pk: &PublicKey,
    authority_sk: &SecretKey,
    entropy: &Entropy,
) -> Result<ManufacturerCertificate, DocumentError> {
    let mfr_id = crypto::random_bytes(entropy, MFR_ID_LEN)?;
    let mut doc = Document::new(
        DocType::Manufacturer,
        vec![
            (tag::MFR_INFO, mfr_info.as_bytes().to_vec()),
            (tag::MFR_PK, mfr_pk.to_wire()),
            (tag::MFR_ID, mfr_id),
        ],
    )?;
    doc.append_signature(authority_sk.public_key().key_id(), authority_sk)?;
    ManufacturerCertificate::try_from(doc)
}

pub fn make_device_certificate(
    dinf: &str,
    device_pk: &PublicKey,
    uuid: Uuid,
    mfr: &ManufacturerCertificate,
    mfr_sk: &SecretKey,
) -> Result<DeviceCertificate, DocumentError> {
    require_key_match(mfr_sk, mfr.mfr_pk(), "manufacturer certificate")?;
    let mut doc = Document::new(
        DocType::Device,
        vec![
            (tag::DEV_INFO, dinf.as_bytes().to_vec()),
            (tag::DEV_PK, device_pk.to_wire()),
            (tag::DEV_UUID, uuid.as_bytes().to_vec()),
            (tag::DEV_MFR_ID, mfr.mfr_id().to_vec()),
        ],
    )?;
    doc.append_signature(*mfr.mfr_id(), mfr_sk)?;
    DeviceCertificate::try_from(doc)
}

pub fn sign_firmware(
    fw_image: &[u8],
    fw_meta: &str,
    mfr_sk: &SecretKey,
    mfr: &ManufacturerCertificate,
) -> Result<FirmwareDocument, DocumentError> {
    require_key_match(mfr_sk, mfr.mfr_pk(), "manufacturer certificate")?;
    let mut doc = Document::new(
        DocType::Firmware,
        vec![
            (tag::FW_META, fw_meta.as_bytes().to_vec()),
            (tag::FW_IMAGE_DIGEST, crypto::hash(fw_image).as_bytes().to_vec()),
            (tag::FW_MFR_ID, mfr.mfr_id().to_vec()),
        ],
    )?;
    doc.append_signature(*mfr.mfr_id(), mfr_sk)?;
    FirmwareDocument::try_from(doc)
}

pub fn make_installation(
    fw_doc: &FirmwareDocument,
    uuid: Uuid,
    instinfo: &str,
    device_sk: &SecretKey,
) -> Result<InstallationDocument, DocumentError> {
    let mut doc = Document::new(
        DocType::Installation,
        vec![
            (tag::INST_FW_DOC_DIGEST, fw_doc.digest().as_bytes().to_vec()),
            (tag::INST_UUID, uuid.as_bytes().to_vec()),
            (tag::INST_INFO, instinfo.as_bytes().to_vec()),
        ],
    )?;
    doc.append_signature(*uuid.as_bytes(), device_sk)?;
    InstallationDocument::try_from(doc)
}

fn configuration_document(cfg_digest: Digest, uuid: Uuid, seq: u64) -> Result<Document, DocumentError> {
    Document::new(
        DocType::Configuration,
        vec![
            (tag::CFG_DIGEST, cfg_digest.as_bytes().to_vec()),
            (tag::CFG_UUID, uuid.as_bytes().to_vec()),
            (tag::CFG_SEQ, seq.to_be_bytes().to_vec()),
        ],
    )
}

pub fn make_configuration(
    cfg_payload: &[u8],
    uuid: Uuid,
    seq: u64,
    device_sk: &SecretKey,
) -> Result<ConfigurationDocument, DocumentError> {
    if seq == 0 {
        return Err(DocumentError::ConstraintViolation("configuration seq 0 is reserved".into()));
    }
    let mut doc = configuration_document(crypto::hash(cfg_payload), uuid, seq)?;
    doc.append_signature(*uuid.as_bytes(), device_sk)?;
    ConfigurationDocument::try_from(doc)
}

/// The unsigned seq-0 configuration standing in for "no configuration yet".
pub fn empty_configuration(uuid: Uuid) -> ConfigurationDocument {
    let doc = configuration_document(crypto::hash(b""), uuid, 0).expect("fixed ascending tags");
    ConfigurationDocument::try_from(doc).expect("well-formed placeholder")
}

/// Hash over the canonical installation encoding followed by the canonical
/// configuration encoding (placeholder when `cfg` is `None`).
pub fn state_digest(inst: &InstallationDocument, cfg: Option<&ConfigurationDocument>) -> Digest {
    let mut buf = inst.encode();
    match cfg {
        Some(c) => buf.extend_from_slice(&c.encode()),
        None => buf.extend_from_slice(&empty_configuration(inst.uuid()).encode()),
    }
    crypto::hash(&buf)
}

pub fn verify_installation(inst: &InstallationDocument, dcrt: &DeviceCertificate, fw_doc: &FirmwareDocument) -> bool {
    inst.uuid() == dcrt.uuid()
        && inst.document().signatures()[0].signer_hint == *dcrt.uuid().as_bytes()
        && inst.document().signature_valid(0, dcrt.device_pk())
        && *inst.fw_doc_digest() == fw_doc.digest()
}

pub fn verify_configuration(cfg: &ConfigurationDocument, dcrt: &DeviceCertificate) -> bool {
    !cfg.is_empty_placeholder()
        && cfg.uuid() == dcrt.uuid()
        && cfg.document().signatures()[0].signer_hint == *dcrt.uuid().as_bytes()
        && cfg.document().signature_valid(0, dcrt.device_pk())
}

/// Why a chain failed to verify. `link` is the index into the chain.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("chain is empty")]
    Empty,
    #[error("trust anchor does not self-verify")]
    AnchorInvalid,
    #[error("link {link}: root document differs from the trust anchor")]
    RootMismatch { link: usize },
    #[error("link {link}: {reason}")]
    Malformed { link: usize, reason: String },
    #[error("link {link}: {from} document cannot be issued by {issuer}")]
    IllegalTransition { link: usize, from: DocType, issuer: DocType },
    #[error("link {link}: expected exactly one signature, found {found}")]
    SignatureCount { link: usize, found: usize },
    #[error("link {link}: signer hint does not name the issuer")]
    SignerMismatch { link: usize },
    #[error("link {link}: signature does not verify under issuer key")]
    BadSignature { link: usize },
    #[error("link {link}: {reason}")]
    ConstraintViolation { link: usize, reason: String },
}

impl ChainError {
    pub fn is_constraint_violation(&self) -> bool {
        matches!(self, ChainError::ConstraintViolation { .. })
    }
}

struct Issuer {
    doc_type: DocType,
    pk: PublicKey,
    hint: [u8; SIGNER_HINT_LEN],
    mfr_id: Option<[u8; MFR_ID_LEN]>,
    uuid: Option<Uuid>,
}

fn issuer_of(doc: &Document, link: usize) -> Result<Issuer, ChainError> {
    let bad = |e: DocumentError| ChainError::Malformed { link, reason: e.to_string() };
    Ok(match doc.doc_type() {
        DocType::Root => {
            let c = RootCertificate::try_from(doc.clone()).map_err(bad)?;
            Issuer { doc_type: DocType::Root, hint: c.authority_pk.key_id(), pk: c.authority_pk, mfr_id: None, uuid: None }
        }
        DocType::Manufacturer => {
            let c = ManufacturerCertificate::try_from(doc.clone()).map_err(bad)?;
            Issuer { doc_type: DocType::Manufacturer, pk: c.mfr_pk, hint: c.mfr_id, mfr_id: Some(c.mfr_id), uuid: None }
        }
        DocType::Device => {
            let c = DeviceCertificate::try_from(doc.clone()).map_err(bad)?;
            Issuer { doc_type: DocType::Device, pk: c.device_pk, hint: *c.uuid.as_bytes(), mfr_id: None, uuid: Some(c.uuid) }
        }
        other => {
            return Err(ChainError::Malformed { link, reason: format!("{other} document cannot issue") });
        }
    })
}

fn required_issuer(doc_type: DocType) -> Option<DocType> {
    match doc_type {
        DocType::Root => None,
        DocType::Manufacturer => Some(DocType::Root),
        DocType::Device | DocType::Firmware => Some(DocType::Manufacturer),
        DocType::Installation | DocType::Configuration => Some(DocType::Device),
    }
}

/// Checks the constraint binding a subject document to its issuer.
fn check_constraints(doc: &Document, issuer: &Issuer, link: usize) -> Result<(), ChainError> {
    let bad = |e: DocumentError| ChainError::Malformed { link, reason: e.to_string() };
    match doc.doc_type() {
        DocType::Device => {
            let c = DeviceCertificate::try_from(doc.clone()).map_err(bad)?;
            if Some(*c.mfr_id()) != issuer.mfr_id {
                return Err(ChainError::ConstraintViolation {
                    link,
                    reason: "device certificate names a different manufacturer than its signer".into(),
                });
            }
        }
        DocType::Firmware => {
            let c = FirmwareDocument::try_from(doc.clone()).map_err(bad)?;
            if Some(*c.mfr_id()) != issuer.mfr_id {
                return Err(ChainError::ConstraintViolation {
                    link,
                    reason: "firmware names a different manufacturer than its signer".into(),
                });
            }
        }
        DocType::Installation => {
            let c = InstallationDocument::try_from(doc.clone()).map_err(bad)?;
            if Some(c.uuid()) != issuer.uuid {
                return Err(ChainError::ConstraintViolation {
                    link,
                    reason: "installation proof names a different device than its signer".into(),
                });
            }
        }
        DocType::Configuration => {
            let c = ConfigurationDocument::try_from(doc.clone()).map_err(bad)?;
            if c.is_empty_placeholder() {
                return Err(ChainError::Malformed { link, reason: "unsigned placeholder configuration".into() });
            }
            if Some(c.uuid()) != issuer.uuid {
                return Err(ChainError::ConstraintViolation {
                    link,
                    reason: "configuration proof names a different device than its signer".into(),
                });
            }
        }
        DocType::Manufacturer => {
            ManufacturerCertificate::try_from(doc.clone()).map_err(bad)?;
        }
        DocType::Root => {}
    }
    Ok(())
}

/// Verifies `chain[0] : chain[1] : … ` against `root`.
///
/// Each document must carry exactly one signature, by the next document in
/// the chain, or by `root` for the last non-root link. A trailing root
/// document is accepted only when byte-identical to the anchor.
pub fn verify_chain(chain: &[Document], root: &RootCertificate) -> Result<(), ChainError> {
    if !root.self_verifies() {
        return Err(ChainError::AnchorInvalid);
    }
    let mut links = chain;
    if let Some((last, rest)) = chain.split_last() {
        if last.doc_type() == DocType::Root {
            if last != root.document() {
                return Err(ChainError::RootMismatch { link: chain.len() - 1 });
            }
            links = rest;
        }
    } else {
        return Err(ChainError::Empty);
    }

    for (link, doc) in links.iter().enumerate() {
        let issuer_doc = links.get(link + 1).unwrap_or(root.document());
        let issuer = issuer_of(issuer_doc, link + 1)?;
        match required_issuer(doc.doc_type()) {
            Some(t) if t == issuer.doc_type => {}
            _ => {
                return Err(ChainError::IllegalTransition { link, from: doc.doc_type(), issuer: issuer.doc_type });
            }
        }
        if doc.signatures().len() != 1 {
            return Err(ChainError::SignatureCount { link, found: doc.signatures().len() });
        }
        if doc.signatures()[0].signer_hint != issuer.hint {
            return Err(ChainError::SignerMismatch { link });
        }
        if !doc.signature_valid(0, &issuer.pk) {
            return Err(ChainError::BadSignature { link });
        }
        check_constraints(doc, &issuer, link)?;
    }
    Ok(())
}
