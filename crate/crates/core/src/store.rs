// SPDX-License-Identifier: Apache-2.0

//! The trust data store.
//!
//! Every admitted record has passed chain verification against the store's
//! root. Records are kept in an append-only log, one per line:
//!
//! ```text
//! <seq> <kind> <lowercase hex of canonical document bytes>
//! ```
//!
//! Loading replays the log through the same admission path, so a log that
//! loads is a log whose every record re-verifies.
//!
//! State records are keyed by `(uuid, state digest)`. The store computes the
//! digest itself from the latest installation and configuration proofs it
//! has admitted for a device.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::thread;

use thiserror::Error;

use crate::crypto::{Uuid, DIGEST_LEN};
use crate::device::StateDigest;
use crate::document::{
    verify_chain, ChainError, ConfigurationDocument, DeviceCertificate, DocType, Document, DocumentError,
    FirmwareDocument, InstallationDocument, ManufacturerCertificate, RootCertificate, MFR_ID_LEN,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("chain verification failed: {0}")]
    ChainInvalid(ChainError),
    #[error("device {0} is already registered")]
    DuplicateUuid(Uuid),
    #[error("unknown issuer: {0}")]
    UnknownIssuer(String),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("configuration seq {offered} is not greater than registered seq {current}")]
    StaleSequence { current: u64, offered: u64 },
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("not found")]
    NotFound,
    #[error("corrupt log at record {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("store protocol error: {0}")]
    Protocol(String),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::ChainInvalid(_) => "ChainInvalid",
            StoreError::DuplicateUuid(_) => "DuplicateUuid",
            StoreError::UnknownIssuer(_) => "UnknownIssuer",
            StoreError::ConstraintViolation(_) => "ConstraintViolation",
            StoreError::StaleSequence { .. } => "StaleSequence",
            StoreError::Malformed(_) => "Malformed",
            StoreError::NotFound => "NotFound",
            StoreError::CorruptLog { .. } => "CorruptLog",
            StoreError::Io(_) => "Io",
            StoreError::Protocol(_) => "Protocol",
        }
    }
}

impl From<ChainError> for StoreError {
    fn from(e: ChainError) -> Self {
        match e {
            ChainError::ConstraintViolation { reason, .. } => StoreError::ConstraintViolation(reason),
            other => StoreError::ChainInvalid(other),
        }
    }
}

impl From<DocumentError> for StoreError {
    fn from(e: DocumentError) -> Self {
        StoreError::Malformed(e.to_string())
    }
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreRecord {
    pub seq: u64,
    pub kind: DocType,
    pub doc: Document,
}

impl StoreRecord {
    pub fn to_log_line(&self) -> String {
        format!("{} {} {}\n", self.seq, self.kind, hex::encode(self.doc.encode()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateIndexEntry {
    pub uuid: Uuid,
    pub state_digest: StateDigest,
    pub inst_ref: u64,
    pub cfg_ref: Option<u64>,
}

/// What the store knows about a device identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceView {
    pub certificate: DeviceCertificate,
    pub manufacturer: ManufacturerCertificate,
}

impl DeviceView {
    pub fn model(&self) -> &str {
        self.certificate.dinf()
    }

    pub fn manufacturer_info(&self) -> &str {
        self.manufacturer.info()
    }

    /// `len (4, BE) | dcrt | len (4, BE) | mcrt`, the `DEV` response payload.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_prefixed(&mut out, &self.certificate.encode());
        put_prefixed(&mut out, &self.manufacturer.encode());
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = WireReader(bytes);
        let certificate = DeviceCertificate::decode(r.prefixed()?)?;
        let manufacturer = ManufacturerCertificate::decode(r.prefixed()?)?;
        r.finish()?;
        Ok(DeviceView { certificate, manufacturer })
    }
}

/// What the store knows about one reported device state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateView {
    pub firmware: FirmwareDocument,
    pub installation: InstallationDocument,
    pub configuration_seq: Option<u64>,
    /// Whether this is the latest registered state for the device.
    pub expected_current: bool,
}

impl StateView {
    pub fn firmware_meta(&self) -> &str {
        self.firmware.meta()
    }

    /// `current (1) | has_cfg (1) | cfg_seq (8, BE) | len | fw_doc | len | inst`,
    /// the `STATE` response payload.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = vec![u8::from(self.expected_current), u8::from(self.configuration_seq.is_some())];
        out.extend_from_slice(&self.configuration_seq.unwrap_or(0).to_be_bytes());
        put_prefixed(&mut out, &self.firmware.encode());
        put_prefixed(&mut out, &self.installation.encode());
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = WireReader(bytes);
        let flags = r.take(2)?;
        let (current, has_cfg) = (flags[0], flags[1]);
        if current > 1 || has_cfg > 1 {
            return Err(StoreError::Protocol("bad flag byte".into()));
        }
        let seq = u64::from_be_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let firmware = FirmwareDocument::decode(r.prefixed()?)?;
        let installation = InstallationDocument::decode(r.prefixed()?)?;
        r.finish()?;
        Ok(StateView {
            firmware,
            installation,
            configuration_seq: (has_cfg == 1).then_some(seq),
            expected_current: current == 1,
        })
    }
}

fn put_prefixed(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

struct WireReader<'a>(&'a [u8]);

impl<'a> WireReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.0.len() < n {
            return Err(StoreError::Protocol("truncated payload".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn prefixed(&mut self) -> Result<&'a [u8], StoreError> {
        let len = u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize;
        self.take(len)
    }

    fn finish(self) -> Result<(), StoreError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(StoreError::Protocol("trailing bytes in payload".into()))
        }
    }
}

/// Read access used by verifiers, in-process or over the line protocol.
pub trait StoreQuery {
    fn lookup_device(&self, uuid: &Uuid) -> Result<DeviceView, StoreError>;
    fn lookup_state(&self, uuid: &Uuid, state: &StateDigest) -> Result<StateView, StoreError>;
}

/// A validated record, ready to be logged and applied.
enum Admitted {
    Manufacturer(ManufacturerCertificate),
    Device(DeviceCertificate),
    Firmware(FirmwareDocument),
    Installation(InstallationDocument),
    Configuration(ConfigurationDocument),
}

pub struct Store {
    root: RootCertificate,
    records: Vec<StoreRecord>,
    manufacturers: HashMap<[u8; MFR_ID_LEN], u64>,
    devices: HashMap<Uuid, u64>,
    firmware: HashMap<[u8; DIGEST_LEN], u64>,
    latest_inst: HashMap<Uuid, u64>,
    latest_cfg: HashMap<Uuid, u64>,
    state_index: HashMap<(Uuid, StateDigest), StateIndexEntry>,
    current_state: HashMap<Uuid, StateDigest>,
    log: Option<File>,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Store")
            .field("root", &self.root.info())
            .field("records", &self.records.len())
            .field("durable", &self.log.is_some())
            .finish()
    }
}

/// Creates an empty store anchored at `root`.
pub fn init_store(root: RootCertificate) -> Result<Store, StoreError> {
    if !root.self_verifies() {
        return Err(StoreError::ChainInvalid(ChainError::AnchorInvalid));
    }
    Ok(Store {
        records: vec![StoreRecord { seq: 0, kind: DocType::Root, doc: root.document().clone() }],
        root,
        manufacturers: HashMap::new(),
        devices: HashMap::new(),
        firmware: HashMap::new(),
        latest_inst: HashMap::new(),
        latest_cfg: HashMap::new(),
        state_index: HashMap::new(),
        current_state: HashMap::new(),
        log: None,
    })
}

impl Store {
    pub fn root(&self) -> &RootCertificate {
        &self.root
    }

    pub fn records(&self) -> &[StoreRecord] {
        &self.records
    }

    /// Whether this exact document has been admitted.
    pub fn contains_document(&self, doc: &Document) -> bool {
        self.records.iter().any(|r| r.doc == *doc)
    }

    pub fn state_entries(&self) -> impl Iterator<Item = &StateIndexEntry> {
        self.state_index.values()
    }

    fn record(&self, seq: u64) -> &StoreRecord {
        &self.records[seq as usize]
    }

    fn typed<T: TryFrom<Document, Error = DocumentError>>(&self, seq: u64) -> T {
        T::try_from(self.record(seq).doc.clone()).expect("admitted records are well-formed")
    }

    fn manufacturer(&self, id: &[u8; MFR_ID_LEN]) -> Result<ManufacturerCertificate, StoreError> {
        self.manufacturers
            .get(id)
            .map(|&seq| self.typed(seq))
            .ok_or_else(|| StoreError::UnknownIssuer(format!("manufacturer {} not registered", hex::encode(id))))
    }

    fn device(&self, uuid: &Uuid) -> Result<DeviceCertificate, StoreError> {
        self.devices
            .get(uuid)
            .map(|&seq| self.typed(seq))
            .ok_or_else(|| StoreError::UnknownIssuer(format!("device {uuid} not registered")))
    }

    /// Admits `doc` after verifying `doc : chain` against the root and
    /// resolving its issuer among registered records. An empty `chain` lets
    /// the store supply the issuer chain itself.
    pub fn register(&mut self, kind: DocType, doc: &Document, chain: &[Document]) -> Result<u64, StoreError> {
        let admitted = self.check(kind, doc, chain)?;
        let record = StoreRecord { seq: self.records.len() as u64, kind, doc: doc.clone() };
        if let Some(log) = self.log.as_mut() {
            log.write_all(record.to_log_line().as_bytes())?;
            log.sync_data()?;
        }
        let seq = record.seq;
        self.records.push(record);
        self.apply(seq, admitted);
        Ok(seq)
    }

    fn check(&self, kind: DocType, doc: &Document, chain: &[Document]) -> Result<Admitted, StoreError> {
        if doc.doc_type() != kind {
            return Err(StoreError::Malformed(format!("{kind} record carries a {} document", doc.doc_type())));
        }
        if !chain.is_empty() {
            let mut full = vec![doc.clone()];
            full.extend_from_slice(chain);
            verify_chain(&full, &self.root)?;
        }

        // Store-resolved issuer chain; the caller's chain must agree with it.
        let (admitted, issuers): (Admitted, Vec<Document>) = match kind {
            DocType::Root => {
                return Err(StoreError::ConstraintViolation("store is already anchored to a root".into()));
            }
            DocType::Manufacturer => {
                let m = ManufacturerCertificate::try_from(doc.clone())?;
                if self.manufacturers.contains_key(m.mfr_id()) {
                    return Err(StoreError::ConstraintViolation(format!(
                        "manufacturer id {} already registered",
                        hex::encode(m.mfr_id())
                    )));
                }
                (Admitted::Manufacturer(m), vec![])
            }
            DocType::Device => {
                let d = DeviceCertificate::try_from(doc.clone())?;
                let m = self.manufacturer(d.mfr_id())?;
                if self.devices.contains_key(&d.uuid()) {
                    return Err(StoreError::DuplicateUuid(d.uuid()));
                }
                (Admitted::Device(d), vec![m.into()])
            }
            DocType::Firmware => {
                let f = FirmwareDocument::try_from(doc.clone())?;
                let m = self.manufacturer(f.mfr_id())?;
                (Admitted::Firmware(f), vec![m.into()])
            }
            DocType::Installation => {
                let i = InstallationDocument::try_from(doc.clone())?;
                let d = self.device(&i.uuid())?;
                let fw_seq = *self.firmware.get(i.fw_doc_digest().as_bytes()).ok_or_else(|| {
                    StoreError::UnknownIssuer(format!("firmware {} not registered", i.fw_doc_digest()))
                })?;
                let fw: FirmwareDocument = self.typed(fw_seq);
                if fw.mfr_id() != d.mfr_id() {
                    return Err(StoreError::ConstraintViolation(
                        "firmware is from a different manufacturer than the device".into(),
                    ));
                }
                let m = self.manufacturer(d.mfr_id())?;
                (Admitted::Installation(i), vec![d.into(), m.into()])
            }
            DocType::Configuration => {
                let c = ConfigurationDocument::try_from(doc.clone())?;
                let d = self.device(&c.uuid())?;
                let current = self.latest_cfg.get(&c.uuid()).map_or(0, |&s| self.typed::<ConfigurationDocument>(s).seq());
                if c.seq() <= current {
                    return Err(StoreError::StaleSequence { current, offered: c.seq() });
                }
                let m = self.manufacturer(d.mfr_id())?;
                (Admitted::Configuration(c), vec![d.into(), m.into()])
            }
        };

        let supplied = match chain.split_last() {
            Some((last, rest)) if last.doc_type() == DocType::Root => rest,
            _ => chain,
        };
        if !supplied.is_empty() && supplied != issuers.as_slice() {
            return Err(StoreError::UnknownIssuer("supplied chain does not match registered issuers".into()));
        }
        let mut full = vec![doc.clone()];
        full.extend(issuers);
        verify_chain(&full, &self.root)?;
        Ok(admitted)
    }

    fn apply(&mut self, seq: u64, admitted: Admitted) {
        match admitted {
            Admitted::Manufacturer(m) => {
                self.manufacturers.insert(*m.mfr_id(), seq);
            }
            Admitted::Device(d) => {
                self.devices.insert(d.uuid(), seq);
            }
            Admitted::Firmware(f) => {
                self.firmware.entry(*f.digest().as_bytes()).or_insert(seq);
            }
            Admitted::Installation(i) => {
                self.latest_inst.insert(i.uuid(), seq);
                self.reindex(i.uuid());
            }
            Admitted::Configuration(c) => {
                self.latest_cfg.insert(c.uuid(), seq);
                self.reindex(c.uuid());
            }
        }
    }

    fn reindex(&mut self, uuid: Uuid) {
        let Some(&inst_ref) = self.latest_inst.get(&uuid) else {
            return;
        };
        let cfg_ref = self.latest_cfg.get(&uuid).copied();
        let inst: InstallationDocument = self.typed(inst_ref);
        let cfg: Option<ConfigurationDocument> = cfg_ref.map(|s| self.typed(s));
        let state_digest = StateDigest::compute(&inst, cfg.as_ref());
        self.state_index
            .entry((uuid, state_digest))
            .or_insert(StateIndexEntry { uuid, state_digest, inst_ref, cfg_ref });
        self.current_state.insert(uuid, state_digest);
    }

    /// Whole log as text, one record per line.
    pub fn to_log(&self) -> String {
        self.records.iter().map(StoreRecord::to_log_line).collect()
    }

    /// Writes the full log to `path`, replacing any previous file atomically.
    pub fn persist(&self, path: &Path) -> Result<(), StoreError> {
        let tmp = tmp_path(path);
        {
            let mut f = File::create(&tmp)?;
            f.write_all(self.to_log().as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Replays a log, revalidating every record.
    pub fn load(path: &Path) -> Result<Store, StoreError> {
        Store::from_log(&fs::read(path)?)
    }

    pub fn from_log(bytes: &[u8]) -> Result<Store, StoreError> {
        let Some(body) = bytes.strip_suffix(b"\n") else {
            let seq = bytes.split(|&b| b == b'\n').count().saturating_sub(1) as u64;
            return Err(StoreError::CorruptLog { seq, reason: "log does not end with a newline".into() });
        };
        let mut store: Option<Store> = None;
        for (i, line) in body.split(|&b| b == b'\n').enumerate() {
            let seq = i as u64;
            let corrupt = |reason: String| StoreError::CorruptLog { seq, reason };
            let (kind, doc) = parse_log_line(line, seq).map_err(corrupt)?;
            match store.as_mut() {
                None => {
                    if kind != DocType::Root {
                        return Err(corrupt("first record must be the root".into()));
                    }
                    let root = RootCertificate::try_from(doc).map_err(|e| corrupt(e.to_string()))?;
                    store = Some(init_store(root).map_err(|e| corrupt(e.to_string()))?);
                }
                Some(s) => {
                    s.register(kind, &doc, &[]).map_err(|e| corrupt(e.to_string()))?;
                }
            }
        }
        store.ok_or(StoreError::CorruptLog { seq: 0, reason: "empty log".into() })
    }

    /// Creates a durable store at `path`; fails if the file exists.
    pub fn create_durable(root: RootCertificate, path: &Path) -> Result<Store, StoreError> {
        let mut store = init_store(root)?;
        let mut f = OpenOptions::new().write(true).create_new(true).open(path)?;
        f.write_all(store.to_log().as_bytes())?;
        f.sync_all()?;
        store.log = Some(f);
        Ok(store)
    }

    /// Loads `path` and keeps it open; each later registration is appended
    /// and synced before its sequence number is returned.
    pub fn open_durable(path: &Path) -> Result<Store, StoreError> {
        let mut store = Store::load(path)?;
        store.log = Some(OpenOptions::new().append(true).open(path)?);
        Ok(store)
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn parse_log_line(line: &[u8], expected_seq: u64) -> Result<(DocType, Document), String> {
    let line = std::str::from_utf8(line).map_err(|_| "record is not UTF-8".to_string())?;
    let mut parts = line.split(' ');
    let (Some(seq), Some(kind), Some(hex_doc), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err("record must have exactly three space-separated fields".into());
    };
    if seq != expected_seq.to_string() {
        return Err(format!("sequence field {seq:?} out of order"));
    }
    let kind = DocType::from_name(kind).ok_or_else(|| format!("unknown record kind {kind:?}"))?;
    if !hex_doc.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return Err("document is not lowercase hexadecimal".into());
    }
    let raw = hex::decode(hex_doc).map_err(|e| e.to_string())?;
    let doc = Document::decode(&raw).map_err(|e| e.to_string())?;
    Ok((kind, doc))
}

impl StoreQuery for Store {
    fn lookup_device(&self, uuid: &Uuid) -> Result<DeviceView, StoreError> {
        let seq = *self.devices.get(uuid).ok_or(StoreError::NotFound)?;
        let certificate: DeviceCertificate = self.typed(seq);
        let manufacturer = self.manufacturer(certificate.mfr_id())?;
        Ok(DeviceView { certificate, manufacturer })
    }

    fn lookup_state(&self, uuid: &Uuid, state: &StateDigest) -> Result<StateView, StoreError> {
        let entry = self.state_index.get(&(*uuid, *state)).ok_or(StoreError::NotFound)?;
        let installation: InstallationDocument = self.typed(entry.inst_ref);
        let fw_seq = self.firmware[installation.fw_doc_digest().as_bytes()];
        let configuration_seq = entry.cfg_ref.map(|s| self.typed::<ConfigurationDocument>(s).seq());
        Ok(StateView {
            firmware: self.typed(fw_seq),
            installation,
            configuration_seq,
            expected_current: self.current_state.get(uuid) == Some(state),
        })
    }
}

impl<T: StoreQuery + ?Sized> StoreQuery for &T {
    fn lookup_device(&self, uuid: &Uuid) -> Result<DeviceView, StoreError> {
        (**self).lookup_device(uuid)
    }

    fn lookup_state(&self, uuid: &Uuid, state: &StateDigest) -> Result<StateView, StoreError> {
        (**self).lookup_state(uuid, state)
    }
}

impl StoreQuery for RwLock<Store> {
    fn lookup_device(&self, uuid: &Uuid) -> Result<DeviceView, StoreError> {
        self.read().expect("store lock").lookup_device(uuid)
    }

    fn lookup_state(&self, uuid: &Uuid, state: &StateDigest) -> Result<StateView, StoreError> {
        self.read().expect("store lock").lookup_state(uuid, state)
    }
}

/// Answers one request line of the store protocol.
///
/// Requests: `DEV <uuid-hex>` and `STATE <uuid-hex> <digest-hex>`.
/// Responses: `OK <hex payload>` or `ERR <code>`.
pub fn handle_request(store: &dyn StoreQuery, line: &str) -> String {
    let words: Vec<&str> = line.split_whitespace().collect();
    let parse_uuid = |s: &str| Uuid::from_hex(s).ok_or("ParseError");
    let result: Result<Vec<u8>, &str> = match words.as_slice() {
        ["DEV", uuid] => parse_uuid(uuid).and_then(|u| store.lookup_device(&u).map(|v| v.to_wire()).map_err(|e| e.code())),
        ["STATE", uuid, digest] => parse_uuid(uuid).and_then(|u| {
            let d = hex::decode(digest)
                .ok()
                .and_then(|b| crate::crypto::Digest::from_bytes(&b))
                .ok_or("ParseError")?;
            store.lookup_state(&u, &StateDigest(d)).map(|v| v.to_wire()).map_err(|e| e.code())
        }),
        _ => Err("UsageError"),
    };
    match result {
        Ok(payload) => format!("OK {}", hex::encode(payload)),
        Err(code) => format!("ERR {code}"),
    }
}

/// Serves the line protocol until the listener fails. One thread per
/// connection; all of them read through the shared lock.
pub fn serve(store: Arc<RwLock<Store>>, listener: TcpListener) -> io::Result<()> {
    for conn in listener.incoming() {
        let conn = conn?;
        let store = Arc::clone(&store);
        thread::spawn(move || {
            let _ = serve_connection(&store, conn);
        });
    }
    Ok(())
}

fn serve_connection(store: &RwLock<Store>, conn: TcpStream) -> io::Result<()> {
    let mut writer = conn.try_clone()?;
    for line in BufReader::new(conn).lines() {
        let reply = handle_request(store, &line?);
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Client for the line protocol. Device views are re-verified against the
/// verifier's own copy of the root before being trusted.
pub struct RemoteStore {
    root: RootCertificate,
    conn: std::sync::Mutex<(BufReader<TcpStream>, TcpStream)>,
}

impl RemoteStore {
    pub fn connect(addr: impl ToSocketAddrs, root: RootCertificate) -> Result<Self, StoreError> {
        let stream = TcpStream::connect(addr)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(RemoteStore { root, conn: std::sync::Mutex::new((reader, stream)) })
    }

    fn request(&self, line: &str) -> Result<Vec<u8>, StoreError> {
        let mut guard = self.conn.lock().map_err(|_| StoreError::Protocol("connection poisoned".into()))?;
        let (reader, writer) = &mut *guard;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
        let mut reply = String::new();
        reader.read_line(&mut reply)?;
        let reply = reply.trim_end();
        if let Some(payload) = reply.strip_prefix("OK ") {
            hex::decode(payload).map_err(|e| StoreError::Protocol(e.to_string()))
        } else if reply == "ERR NotFound" {
            Err(StoreError::NotFound)
        } else {
            Err(StoreError::Protocol(format!("unexpected reply {reply:?}")))
        }
    }
}

impl StoreQuery for RemoteStore {
    fn lookup_device(&self, uuid: &Uuid) -> Result<DeviceView, StoreError> {
        let view = DeviceView::from_wire(&self.request(&format!("DEV {uuid}"))?)?;
        if view.certificate.uuid() != *uuid {
            return Err(StoreError::Protocol("store answered for a different device".into()));
        }
        verify_chain(&[view.certificate.document().clone(), view.manufacturer.document().clone()], &self.root)?;
        Ok(view)
    }

    fn lookup_state(&self, uuid: &Uuid, state: &StateDigest) -> Result<StateView, StoreError> {
        StateView::from_wire(&self.request(&format!("STATE {uuid} {}", state.0))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{self, Entropy, SecretKey};
    use crate::device::{device_birth, DeviceState};
    use crate::document::{make_manufacturer_certificate, make_root_certificate, sign_firmware};

    struct World {
        e: Entropy,
        auth_sk: SecretKey,
        store: Store,
        mfr: ManufacturerCertificate,
        mfr_sk: SecretKey,
    }

    fn world(seed: u64) -> World {
        let e = Entropy::seeded(seed);
        let (apk, ask) = crypto::generate_keypair(&e).unwrap();
        let root = make_root_certificate("authority", &apk, &ask).unwrap();
        let mut store = init_store(root).unwrap();
        let (mpk, msk) = crypto::generate_keypair(&e).unwrap();
        let mfr = make_manufacturer_certificate("Acme Sensors", &mpk, &ask, &e).unwrap();
        store.register(DocType::Manufacturer, mfr.document(), &[]).unwrap();
        World { e, auth_sk: ask, store, mfr, mfr_sk: msk }
    }

    impl World {
        fn device(&mut self) -> (DeviceState, DeviceCertificate) {
            let (dev, dcrt) = device_birth(&self.mfr, &self.mfr_sk, self.store.root(), "smart lock", &self.e).unwrap();
            self.store.register(DocType::Device, dcrt.document(), &[self.mfr.document().clone()]).unwrap();
            (dev, dcrt)
        }

        fn install(&mut self, dev: &mut DeviceState, image: &[u8], register: bool) -> FirmwareDocument {
            let fw = sign_firmware(image, &format!("fw {}", String::from_utf8_lossy(image)), &self.mfr_sk, &self.mfr).unwrap();
            self.store.register(DocType::Firmware, fw.document(), &[]).unwrap();
            let inst = dev.install_firmware(&fw, image, &[self.mfr.document().clone()], "slot=0").unwrap();
            if register {
                self.store.register(DocType::Installation, inst.document(), &[]).unwrap();
            }
            fw
        }
    }

    #[test]
    fn empty_store_lookups_and_bad_root() {
        let w = world(1);
        let e = Entropy::seeded(11);
        assert_eq!(w.store.lookup_device(&crypto::generate_uuid(&e).unwrap()), Err(StoreError::NotFound));

        let mut bytes = w.store.root().encode();
        bytes[8] ^= 0x40;
        let bad = RootCertificate::decode(&bytes).unwrap();
        assert_eq!(init_store(bad).unwrap_err().code(), "ChainInvalid");

        let fresh = init_store(w.store.root().clone()).unwrap();
        let reloaded = Store::from_log(fresh.to_log().as_bytes()).unwrap();
        assert_eq!(reloaded.records(), fresh.records());
    }

    #[test]
    fn device_registration_and_lookup() {
        let mut w = world(2);
        let (dev, dcrt) = w.device();
        let view = w.store.lookup_device(&dev.uuid()).unwrap();
        assert_eq!(view.model(), "smart lock");
        assert_eq!(view.manufacturer_info(), "Acme Sensors");
        assert_eq!(view.certificate, dcrt);
        let chain = [view.certificate.document().clone(), view.manufacturer.document().clone()];
        assert!(verify_chain(&chain, w.store.root()).is_ok());
    }

    #[test]
    fn device_under_unregistered_manufacturer_is_unknown_issuer() {
        let mut w = world(3);
        let (pk, sk) = crypto::generate_keypair(&w.e).unwrap();
        let other = make_manufacturer_certificate("Unlisted", &pk, &w.auth_sk, &w.e).unwrap();
        let (_, dcrt) = device_birth(&other, &sk, w.store.root(), "x", &w.e).unwrap();
        let err = w.store.register(DocType::Device, dcrt.document(), &[other.document().clone()]).unwrap_err();
        assert_eq!(err.code(), "UnknownIssuer");
        assert_eq!(w.store.register(DocType::Device, dcrt.document(), &[]).unwrap_err().code(), "UnknownIssuer");
    }

    #[test]
    fn duplicate_uuid_rejected() {
        let mut w = world(4);
        let (_, dcrt) = w.device();
        let err = w.store.register(DocType::Device, dcrt.document(), &[]).unwrap_err();
        assert_eq!(err, StoreError::DuplicateUuid(dcrt.uuid()));
    }

    #[test]
    fn kind_mismatch_and_root_registration_rejected() {
        let mut w = world(5);
        let mfr = w.mfr.document().clone();
        assert_eq!(w.store.register(DocType::Device, &mfr, &[]).unwrap_err().code(), "Malformed");
        let root = w.store.root().document().clone();
        assert!(w.store.register(DocType::Root, &root, &[]).is_err());
    }

    #[test]
    fn state_lookup_tracks_current_and_superseded() {
        let mut w = world(6);
        let (mut dev, _) = w.device();
        w.install(&mut dev, b"v1", true);
        let s1 = dev.compute_state_digest().unwrap();
        let view = w.store.lookup_state(&dev.uuid(), &s1).unwrap();
        assert!(view.expected_current);
        assert_eq!(view.firmware_meta(), "fw v1");
        assert_eq!(view.configuration_seq, None);

        w.install(&mut dev, b"v2", true);
        let s2 = dev.compute_state_digest().unwrap();
        assert!(w.store.lookup_state(&dev.uuid(), &s2).unwrap().expected_current);
        assert!(!w.store.lookup_state(&dev.uuid(), &s1).unwrap().expected_current);

        let random = StateDigest(crypto::hash(b"nothing"));
        assert_eq!(w.store.lookup_state(&dev.uuid(), &random), Err(StoreError::NotFound));
    }

    #[test]
    fn configuration_admission_and_staleness() {
        let mut w = world(7);
        let (mut dev, _) = w.device();
        w.install(&mut dev, b"v1", true);
        let c1 = dev.apply_configuration(b"a", 1).unwrap();
        let c2 = dev.apply_configuration(b"b", 2).unwrap();
        w.store.register(DocType::Configuration, c2.document(), &[]).unwrap();
        let s = dev.compute_state_digest().unwrap();
        assert_eq!(w.store.lookup_state(&dev.uuid(), &s).unwrap().configuration_seq, Some(2));
        assert!(matches!(
            w.store.register(DocType::Configuration, c1.document(), &[]),
            Err(StoreError::StaleSequence { current: 2, offered: 1 })
        ));
    }

    #[test]
    fn installation_of_unregistered_firmware_is_unknown_issuer() {
        let mut w = world(8);
        let (mut dev, _) = w.device();
        let fw = sign_firmware(b"dev build", "debug", &w.mfr_sk, &w.mfr).unwrap();
        let inst = dev.install_firmware(&fw, b"dev build", &[w.mfr.document().clone()], "slot=0").unwrap();
        assert_eq!(w.store.register(DocType::Installation, inst.document(), &[]).unwrap_err().code(), "UnknownIssuer");
    }

    #[test]
    fn cross_signed_device_is_constraint_violation() {
        let mut w = world(9);
        let (pk_b, sk_b) = crypto::generate_keypair(&w.e).unwrap();
        let mfr_b = make_manufacturer_certificate("Other", &pk_b, &w.auth_sk, &w.e).unwrap();
        w.store.register(DocType::Manufacturer, mfr_b.document(), &[]).unwrap();
        let (dev_pk, _) = crypto::generate_keypair(&w.e).unwrap();
        let uuid = crypto::generate_uuid(&w.e).unwrap();
        let mut doc = Document::new(
            DocType::Device,
            vec![
                (crate::document::tag::DEV_INFO, b"clone".to_vec()),
                (crate::document::tag::DEV_PK, dev_pk.to_wire()),
                (crate::document::tag::DEV_UUID, uuid.as_bytes().to_vec()),
                (crate::document::tag::DEV_MFR_ID, w.mfr.mfr_id().to_vec()),
            ],
        )
        .unwrap();
        doc.append_signature(*mfr_b.mfr_id(), &sk_b).unwrap();
        let err = w.store.register(DocType::Device, &doc, &[mfr_b.document().clone()]).unwrap_err();
        assert_eq!(err.code(), "ConstraintViolation");
    }

    #[test]
    fn persist_load_round_trip_and_corruption() {
        let mut w = world(10);
        let (mut a, _) = w.device();
        let (mut b, _) = w.device();
        w.install(&mut a, b"a1", true);
        w.install(&mut b, b"b1", true);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.tltlog");
        w.store.persist(&path).unwrap();
        let loaded = Store::load(&path).unwrap();
        assert_eq!(loaded.records(), w.store.records());
        for dev in [&a, &b] {
            let s = dev.compute_state_digest().unwrap();
            assert_eq!(loaded.lookup_device(&dev.uuid()), w.store.lookup_device(&dev.uuid()));
            assert_eq!(loaded.lookup_state(&dev.uuid(), &s), w.store.lookup_state(&dev.uuid(), &s));
        }

        let mut bytes = fs::read(&path).unwrap();
        let line_starts: Vec<usize> =
            std::iter::once(0).chain(bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i + 1)).collect();
        let target = line_starts[3] + 10;
        bytes[target] ^= 0x01;
        match Store::from_log(&bytes) {
            Err(StoreError::CorruptLog { seq, .. }) => assert_eq!(seq, 3),
            other => panic!("expected CorruptLog, got {other:?}"),
        }
    }

    #[test]
    fn uppercase_hex_is_corruption() {
        let w = world(11);
        let mut bytes = w.store.to_log().into_bytes();
        // first a-f digit in the hex column of the first record
        let hex_start = bytes.iter().enumerate().filter(|(_, &b)| b == b' ').nth(1).unwrap().0 + 1;
        let pos = (hex_start..bytes.len()).find(|&i| (b'a'..=b'f').contains(&bytes[i])).unwrap();
        bytes[pos] = bytes[pos].to_ascii_uppercase();
        assert_eq!(Store::from_log(&bytes).unwrap_err().code(), "CorruptLog");
    }

    #[test]
    fn durable_store_appends_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tltlog");
        let mut w = world(12);
        let mut durable = Store::create_durable(w.store.root().clone(), &path).unwrap();
        durable.register(DocType::Manufacturer, w.mfr.document(), &[]).unwrap();
        let (mut dev, dcrt) = device_birth(&w.mfr, &w.mfr_sk, durable.root(), "x", &w.e).unwrap();
        durable.register(DocType::Device, dcrt.document(), &[]).unwrap();
        w.store = durable;
        w.install(&mut dev, b"img", true);
        drop(w);

        let reopened = Store::open_durable(&path).unwrap();
        assert_eq!(reopened.records().len(), 5);
        let s = dev.compute_state_digest().unwrap();
        assert!(reopened.lookup_state(&dev.uuid(), &s).unwrap().expected_current);
        assert!(Store::create_durable(reopened.root().clone(), &path).is_err());
    }

    #[test]
    fn index_entries_recompute_from_referenced_records() {
        let mut w = world(13);
        let (mut dev, _) = w.device();
        w.install(&mut dev, b"v1", true);
        let c = dev.apply_configuration(b"c", 1).unwrap();
        w.store.register(DocType::Configuration, c.document(), &[]).unwrap();
        w.install(&mut dev, b"v2", true);
        assert_eq!(w.store.state_entries().count(), 3);
        for entry in w.store.state_entries() {
            let inst: InstallationDocument = w.store.typed(entry.inst_ref);
            let cfg: Option<ConfigurationDocument> = entry.cfg_ref.map(|s| w.store.typed(s));
            assert_eq!(StateDigest::compute(&inst, cfg.as_ref()), entry.state_digest);
        }
    }

    #[test]
    fn line_protocol_requests() {
        let mut w = world(14);
        let (mut dev, dcrt) = w.device();
        w.install(&mut dev, b"v1", true);
        let s = dev.compute_state_digest().unwrap();

        let reply = handle_request(&w.store, &format!("DEV {}", dev.uuid()));
        let payload = hex::decode(reply.strip_prefix("OK ").unwrap()).unwrap();
        assert_eq!(DeviceView::from_wire(&payload).unwrap().certificate, dcrt);

        let reply = handle_request(&w.store, &format!("STATE {} {}", dev.uuid(), s));
        let view = StateView::from_wire(&hex::decode(reply.strip_prefix("OK ").unwrap()).unwrap()).unwrap();
        assert!(view.expected_current);

        assert_eq!(handle_request(&w.store, &format!("STATE {} {}", dev.uuid(), crypto::hash(b""))), "ERR NotFound");
        assert_eq!(handle_request(&w.store, "DEV zz"), "ERR ParseError");
        assert_eq!(handle_request(&w.store, "PUT x"), "ERR UsageError");
        assert_eq!(handle_request(&w.store, ""), "ERR UsageError");
    }

    #[test]
    fn remote_store_over_tcp() {
        let mut w = world(15);
        let (mut dev, dcrt) = w.device();
        w.install(&mut dev, b"v1", true);
        let root = w.store.root().clone();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let shared = Arc::new(RwLock::new(w.store));
        thread::spawn(move || serve(shared, listener));

        let remote = RemoteStore::connect(addr, root).unwrap();
        assert_eq!(remote.lookup_device(&dev.uuid()).unwrap().certificate, dcrt);
        let s = dev.compute_state_digest().unwrap();
        assert!(remote.lookup_state(&dev.uuid(), &s).unwrap().expected_current);
        let unknown = crypto::generate_uuid(&w.e).unwrap();
        assert_eq!(remote.lookup_device(&unknown), Err(StoreError::NotFound));
    }
}
