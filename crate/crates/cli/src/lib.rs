// SPDX-License-Identifier: Apache-2.0

//! Command-line actors: authority, manufacturer, device, store, verifier,
//! and the threat scenario runner.
//!
//! Every command prints line-oriented output. Errors go to stderr as
//! `<ErrorCode>: <message>` with exit status 1; usage errors exit with 2.

use std::fs;
use std::io::{self, BufRead, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use clap::{Args, Parser, Subcommand};

use tlt_core::crypto::{self, Entropy, Nonce, SecretKey};
use tlt_core::device::{device_birth, DeviceState};
use tlt_core::document::{
    make_manufacturer_certificate, make_root_certificate, sign_firmware, DocType, Document, FirmwareDocument,
    ManufacturerCertificate, RootCertificate,
};
use tlt_core::store::{self, RemoteStore, Store, StoreQuery};
use tlt_core::threats::{self, Responder, ScenarioId};
use tlt_core::transport::{self, DataFrame, MsgType};
use tlt_core::verifier::{self, trust_decision, TrustVerdict, Verifier};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        CliError::new("UsageError", message)
    }

    pub fn exit_code(&self) -> i32 {
        if self.code == "UsageError" {
            EXIT_USAGE
        } else {
            EXIT_FAILURE
        }
    }
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(e.code(), e.to_string())
            }
        }
    )*};
}

coded!(
    crypto::CryptoError,
    tlt_core::document::DocumentError,
    tlt_core::device::DeviceError,
    tlt_core::store::StoreError,
    tlt_core::transport::TransportError,
    tlt_core::verifier::VerifierError
);

impl From<tlt_core::document::ChainError> for CliError {
    fn from(e: tlt_core::document::ChainError) -> Self {
        tlt_core::store::StoreError::from(e).into()
    }
}

impl From<threats::ScenarioError> for CliError {
    fn from(e: threats::ScenarioError) -> Self {
        CliError::new("ScenarioError", e.to_string())
    }
}

type CliResult = Result<(), CliError>;

#[derive(Debug, Parser)]
#[command(name = "tlt", version, about = "Touch-less trust toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Store log file.
    #[arg(long, global = true, env = "TLT_STORE")]
    pub store: Option<PathBuf>,
    /// Secret key of the acting party.
    #[arg(long, global = true)]
    pub key: Option<PathBuf>,
    /// Deterministic randomness for reproducible runs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Hex dump every radio frame.
    #[arg(long, global = true)]
    pub trace_frames: bool,
    /// Accept whenever the gate is open, without prompting.
    #[arg(long, global = true)]
    pub auto_accept: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trust authority.
    #[command(subcommand)]
    Authority(AuthorityCmd),
    /// Manufacturer.
    #[command(subcommand)]
    Mfr(MfrCmd),
    /// Simulated device.
    #[command(subcommand)]
    Device(DeviceCmd),
    /// Record store.
    #[command(subcommand)]
    Store(StoreCmd),
    /// User-side verifier.
    #[command(subcommand)]
    Verify(VerifyCmd),
    /// Threat scenarios.
    #[command(subcommand)]
    Threats(ThreatsCmd),
}

#[derive(Debug, Subcommand)]
pub enum AuthorityCmd {
    /// Create the authority key, root certificate and an empty store.
    Init {
        #[arg(long, default_value = "TLT authority")]
        info: String,
        /// Where to write the root certificate; defaults next to the key.
        #[arg(long)]
        root_out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum MfrCmd {
    /// Create a manufacturer key and certificate, and register it.
    Register {
        #[arg(long)]
        info: String,
        #[arg(long)]
        authority_key: PathBuf,
        /// Certificate output; defaults next to the key.
        #[arg(long)]
        cert_out: Option<PathBuf>,
    },
    /// Sign a firmware image and publish it to the store.
    SignFw {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        meta: String,
        #[arg(long)]
        cert: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_register: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum DeviceCmd {
    /// Provision a new device and register its certificate.
    Birth {
        #[arg(long)]
        dinf: String,
        #[arg(long)]
        mfr_key: PathBuf,
        #[arg(long)]
        cert: PathBuf,
        /// Device state file; the device key is written beside it.
        #[arg(long)]
        state: PathBuf,
    },
    /// Verify and install firmware, then register the installation.
    Install {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        fw: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "")]
        instinfo: String,
        #[arg(long)]
        no_register: bool,
    },
    /// Apply a configuration payload and register it.
    Configure {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seq: u64,
        #[arg(long)]
        no_register: bool,
    },
    /// Print the advertising frame.
    Advertise {
        #[arg(long)]
        state: PathBuf,
    },
    /// Answer challenge frames given as `FRAME <hex>` lines or --frame.
    Respond {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        frame: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum StoreCmd {
    /// Serve lookups over the line protocol.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7411")]
        listen: String,
    },
    /// Print the store log.
    Dump,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCmd {
    /// Decode an advertising frame.
    Scan {
        #[arg(long)]
        frame: String,
    },
    /// Challenge a device and print the verdict.
    ///
    /// With --device the exchange runs over an in-memory radio. With --adv
    /// the challenge frames are printed and the response frames are read
    /// from stdin.
    Challenge {
        #[arg(long, conflicts_with = "adv", required_unless_present = "adv")]
        device: Option<PathBuf>,
        #[arg(long)]
        adv: Option<String>,
        /// Query a served store instead of reading --store.
        #[arg(long, requires = "root")]
        connect: Option<String>,
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Accept or reject a verdict line given as --verdict or on stdin.
    Decide {
        #[arg(long)]
        verdict: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ThreatsCmd {
    /// Run one scenario (TA01..TA06, HONEST) or all of them.
    Run { id: Option<String> },
}

/// Parses `argv` and runs the command. Returns the process exit status.
pub fn run<I, T>(argv: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let text = e.to_string();
            let _ = writeln!(err, "UsageError: {}", text.trim_start_matches("error: ").trim_end());
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli, input, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{}: {}", e.code, e.message);
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let g = &cli.global;
    let entropy = Entropy::from_seed(g.seed);
    match &cli.command {
        Command::Authority(AuthorityCmd::Init { info, root_out }) => authority_init(g, &entropy, info, root_out.as_deref(), out),
        Command::Mfr(MfrCmd::Register { info, authority_key, cert_out }) => {
            mfr_register(g, &entropy, info, authority_key, cert_out.as_deref(), out)
        }
        Command::Mfr(MfrCmd::SignFw { image, meta, cert, out: fw_out, no_register }) => {
            mfr_sign_fw(g, image, meta, cert, fw_out, *no_register, out)
        }
        Command::Device(cmd) => device(g, &entropy, cmd, input, out),
        Command::Store(StoreCmd::Serve { listen }) => store_serve(g, listen, out),
        Command::Store(StoreCmd::Dump) => {
            let store = Store::load(store_path(g)?)?;
            out.write_all(store.to_log().as_bytes()).map_err(io_err)
        }
        Command::Verify(VerifyCmd::Scan { frame }) => {
            let uuid = verifier::scan(&parse_hex(frame)?)?;
            line(out, format!("UUID {uuid}"))
        }
        Command::Verify(VerifyCmd::Challenge { device, adv, connect, root }) => {
            verify_challenge(g, &entropy, device.as_deref(), adv.as_deref(), connect.as_deref(), root.as_deref(), input, out)
        }
        Command::Verify(VerifyCmd::Decide { verdict }) => verify_decide(g, verdict.as_deref(), input, out, err),
        Command::Threats(ThreatsCmd::Run { id }) => threats_run(g, id.as_deref(), out),
    }
}

fn io_err(e: io::Error) -> CliError {
    CliError::new("Io", e.to_string())
}

fn line(out: &mut dyn Write, s: impl AsRef<str>) -> CliResult {
    writeln!(out, "{}", s.as_ref()).map_err(io_err)
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::new("Io", format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| CliError::new("Io", format!("{}: {e}", path.display())))
}

fn parse_hex(s: &str) -> Result<Vec<u8>, CliError> {
    hex::decode(s.trim()).map_err(|e| CliError::new("ParseError", format!("bad hex: {e}")))
}

fn store_path(g: &Global) -> Result<&Path, CliError> {
    g.store.as_deref().ok_or_else(|| CliError::usage("missing --store (or TLT_STORE)"))
}

fn key_path(g: &Global) -> Result<&Path, CliError> {
    g.key.as_deref().ok_or_else(|| CliError::usage("missing --key"))
}

fn load_key(path: &Path) -> Result<SecretKey, CliError> {
    Ok(SecretKey::import(&read(path)?)?)
}

fn write_new_key(path: &Path, sk: &SecretKey) -> CliResult {
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| CliError::new("Io", format!("{}: {e}", path.display())))?;
    f.write_all(&sk.export()).map_err(io_err)?;
    if let Some(stem) = path.file_stem() {
        let mut pub_path = path.with_file_name(stem);
        pub_path.set_extension("tltpub");
        write(&pub_path, &sk.public_key().to_wire())?;
    }
    Ok(())
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn authority_init(g: &Global, entropy: &Entropy, info: &str, root_out: Option<&Path>, out: &mut dyn Write) -> CliResult {
    let key = key_path(g)?;
    let store = store_path(g)?;
    let (pk, sk) = crypto::generate_keypair(entropy)?;
    let root = make_root_certificate(info, &pk, &sk)?;
    write_new_key(key, &sk)?;
    let root_path = root_out.map(Path::to_path_buf).unwrap_or_else(|| sibling(key, "tltroot"));
    write(&root_path, &root.encode())?;
    Store::create_durable(root.clone(), store)?;
    line(out, format!("ROOT {}", root.digest()))?;
    line(out, format!("KEYID {}", hex::encode(pk.key_id())))
}

fn mfr_register(
    g: &Global,
    entropy: &Entropy,
    info: &str,
    authority_key: &Path,
    cert_out: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult {
    let key = key_path(g)?;
    let mut store = Store::open_durable(store_path(g)?)?;
    let authority = load_key(authority_key)?;
    if authority.public_key() != *store.root().authority_pk() {
        return Err(CliError::new("InvalidKey", "authority key does not match the store root"));
    }
    let (pk, sk) = crypto::generate_keypair(entropy)?;
    let cert = make_manufacturer_certificate(info, &pk, &authority, entropy)?;
    let seq = store.register(DocType::Manufacturer, cert.document(), &[])?;
    write_new_key(key, &sk)?;
    write(&cert_out.map(Path::to_path_buf).unwrap_or_else(|| sibling(key, "tltmcrt")), &cert.encode())?;
    line(out, format!("MFR {}", hex::encode(cert.mfr_id())))?;
    line(out, format!("REGISTERED {seq} manufacturer"))
}

fn load_mfr(path: &Path) -> Result<ManufacturerCertificate, CliError> {
    Ok(ManufacturerCertificate::decode(&read(path)?)?)
}

fn mfr_sign_fw(
    g: &Global,
    image: &Path,
    meta: &str,
    cert: &Path,
    fw_out: &Path,
    no_register: bool,
    out: &mut dyn Write,
) -> CliResult {
    let sk = load_key(key_path(g)?)?;
    let mfr = load_mfr(cert)?;
    let fw = sign_firmware(&read(image)?, meta, &sk, &mfr)?;
    if !no_register {
        let seq = Store::open_durable(store_path(g)?)?.register(DocType::Firmware, fw.document(), &[])?;
        line(out, format!("REGISTERED {seq} firmware"))?;
    }
    write(fw_out, &fw.encode())?;
    line(out, format!("FIRMWARE {}", fw.digest()))
}

struct LoadedDevice {
    state: DeviceState,
    path: PathBuf,
    key_ref: String,
}

impl LoadedDevice {
    fn load(g: &Global, path: &Path) -> Result<Self, CliError> {
        let key = g.key.clone().unwrap_or_else(|| sibling(path, "tltkey"));
        let (state, key_ref) = DeviceState::decode_state(&read(path)?, load_key(&key)?)?;
        Ok(LoadedDevice { state, path: path.to_path_buf(), key_ref })
    }

    fn save(&self) -> CliResult {
        write(&self.path, &self.state.encode_state(&self.key_ref))
    }
}

fn key_ref_for(key: &Path) -> String {
    key.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn device(g: &Global, entropy: &Entropy, cmd: &DeviceCmd, input: &mut dyn BufRead, out: &mut dyn Write) -> CliResult {
    match cmd {
        DeviceCmd::Birth { dinf, mfr_key, cert, state } => {
            let mfr_sk = load_key(mfr_key)?;
            let mfr = load_mfr(cert)?;
            let mut store = Store::open_durable(store_path(g)?)?;
            let (dev, dcrt) = device_birth(&mfr, &mfr_sk, store.root(), dinf, entropy)?;
            let seq = store.register(DocType::Device, dcrt.document(), &[])?;
            let key = g.key.clone().unwrap_or_else(|| sibling(state, "tltkey"));
            write_new_key(&key, &dev.export_secret_key())?;
            write(state, &dev.encode_state(&key_ref_for(&key)))?;
            line(out, format!("DEVICE {}", dev.uuid()))?;
            line(out, format!("REGISTERED {seq} device"))
        }
        DeviceCmd::Install { state, fw, image, instinfo, no_register } => {
            let mut dev = LoadedDevice::load(g, state)?;
            let fw = FirmwareDocument::decode(&read(fw)?)?;
            let path = store_path(g)?;
            let mut store = if *no_register { Store::load(path)? } else { Store::open_durable(path)? };
            let issuer = manufacturer_of(&store, fw.mfr_id())?;
            let inst = dev.state.install_firmware(&fw, &read(image)?, &[issuer], instinfo)?;
            if !no_register {
                let seq = store.register(DocType::Installation, inst.document(), &[])?;
                line(out, format!("REGISTERED {seq} installation"))?;
            }
            dev.save()?;
            line(out, format!("STATE {}", dev.state.compute_state_digest()?))
        }
        DeviceCmd::Configure { state, config, seq, no_register } => {
            let mut dev = LoadedDevice::load(g, state)?;
            let cfg = dev.state.apply_configuration(&read(config)?, *seq)?;
            if !no_register {
                let n = Store::open_durable(store_path(g)?)?.register(DocType::Configuration, cfg.document(), &[])?;
                line(out, format!("REGISTERED {n} configuration"))?;
            }
            dev.save()?;
            line(out, format!("STATE {}", dev.state.compute_state_digest()?))
        }
        DeviceCmd::Advertise { state } => {
            let dev = LoadedDevice::load(g, state)?;
            let frame = dev.state.advertise().encode();
            line(out, format!("ADV {}", hex::encode(frame)))
        }
        DeviceCmd::Respond { state, frame } => {
            let dev = LoadedDevice::load(g, state)?;
            let frames = if frame.is_empty() { read_frame_lines(input)? } else { frame.clone() };
            let (kind, payload) = reassemble_hex(&frames)?;
            if kind != MsgType::Challenge {
                return Err(CliError::new("ParseError", "expected a challenge message"));
            }
            let challenge = Nonce::from_bytes(&payload).ok_or_else(|| CliError::new("ParseError", "challenge is not 16 bytes"))?;
            let resp = dev.state.handle_challenge(&challenge, entropy)?;
            for f in transport::fragment(MsgType::Response, &resp.to_bytes(), false)? {
                line(out, format!("FRAME {}", hex::encode(f.encode())))?;
            }
            Ok(())
        }
    }
}

fn manufacturer_of(store: &Store, mfr_id: &[u8; 16]) -> Result<Document, CliError> {
    store
        .records()
        .iter()
        .filter(|r| r.kind == DocType::Manufacturer)
        .map(|r| &r.doc)
        .find(|d| ManufacturerCertificate::try_from(Document::clone(d)).is_ok_and(|m| m.mfr_id() == mfr_id))
        .cloned()
        .ok_or_else(|| CliError::new("UnknownIssuer", "firmware manufacturer is not registered"))
}

fn read_frame_lines(input: &mut dyn BufRead) -> Result<Vec<String>, CliError> {
    let mut frames = Vec::new();
    for l in input.lines() {
        let l = l.map_err(io_err)?;
        let l = l.trim();
        if l.is_empty() || l == "END" {
            break;
        }
        match l.strip_prefix("FRAME ") {
            Some(h) => frames.push(h.to_string()),
            None => return Err(CliError::new("ParseError", format!("expected `FRAME <hex>`, got {l:?}"))),
        }
    }
    Ok(frames)
}

fn reassemble_hex(frames: &[String]) -> Result<(MsgType, Vec<u8>), CliError> {
    let decoded = frames
        .iter()
        .map(|f| Ok(DataFrame::decode(&parse_hex(f)?)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(transport::reassemble(&decoded)?)
}

fn store_serve(g: &Global, listen: &str, out: &mut dyn Write) -> CliResult {
    let store = Store::load(store_path(g)?)?;
    let listener = TcpListener::bind(listen).map_err(io_err)?;
    line(out, format!("LISTENING {}", listener.local_addr().map_err(io_err)?))?;
    out.flush().map_err(io_err)?;
    store::serve(Arc::new(RwLock::new(store)), listener).map_err(io_err)
}

#[allow(clippy::too_many_arguments)]
fn verify_challenge(
    g: &Global,
    entropy: &Entropy,
    device: Option<&Path>,
    adv: Option<&str>,
    connect: Option<&str>,
    root: Option<&Path>,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> CliResult {
    let store: Box<dyn StoreQuery> = match (connect, root) {
        (Some(addr), Some(root)) => Box::new(RemoteStore::connect(addr, RootCertificate::decode(&read(root)?)?)?),
        _ => Box::new(Store::load(store_path(g)?)?),
    };
    let mut v = Verifier::new(entropy.clone());
    let verdict = match (device, adv) {
        (Some(path), _) => {
            let dev = LoadedDevice::load(g, path)?;
            let (verdict, trace) = threats::run_exchange(&mut v, &Responder::Device(&dev.state), &*store, entropy, &[], g.trace_frames)?;
            for t in trace {
                line(out, format!("TRACE {t}"))?;
            }
            verdict
        }
        (None, Some(adv)) => {
            let uuid = verifier::scan(&parse_hex(adv)?)?;
            let (_, frames) = v.issue_challenge(uuid)?;
            for f in frames {
                line(out, format!("FRAME {}", hex::encode(f.encode())))?;
            }
            line(out, "END")?;
            out.flush().map_err(io_err)?;
            let reply = read_frame_lines(input)?;
            if g.trace_frames {
                for f in &reply {
                    line(out, format!("TRACE verifier rx {f}"))?;
                }
            }
            match reassemble_hex(&reply) {
                Ok((MsgType::Response, payload)) => v.verify_response(uuid, &payload, &*store)?,
                Ok(_) => v.abandon(uuid, &*store, "device sent an unexpected message")?,
                Err(e) => v.abandon(uuid, &*store, &format!("no usable response: {}", e.message))?,
            }
        }
        (None, None) => return Err(CliError::usage("one of --device or --adv is required")),
    };
    line(out, verdict.to_line())
}

fn verify_decide(g: &Global, verdict: Option<&str>, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let text = match verdict {
        Some(v) => v.to_string(),
        None => {
            let mut l = String::new();
            input.read_line(&mut l).map_err(io_err)?;
            l
        }
    };
    let verdict = TrustVerdict::parse_line(text.trim())?;
    let accepted = trust_decision(&verdict, g.auto_accept, |v| {
        let _ = write!(err, "accept device {} ({})? [y/N] ", v.uuid, v.state_check);
        let _ = err.flush();
        let mut answer = String::new();
        input.read_line(&mut answer).is_ok() && matches!(answer.trim(), "y" | "Y" | "yes")
    });
    line(out, format!("DECISION {} uuid={}", if accepted { "accept" } else { "reject" }, verdict.uuid))
}

fn threats_run(g: &Global, id: Option<&str>, out: &mut dyn Write) -> CliResult {
    let seed = g.seed.unwrap_or(0);
    let ids: Vec<ScenarioId> = match id {
        Some(s) => vec![ScenarioId::parse(s).ok_or_else(|| CliError::usage(format!("unknown scenario {s:?}")))?],
        None => ScenarioId::ALL.to_vec(),
    };
    let mut failed = 0;
    for id in &ids {
        let report = threats::run_scenario(*id, seed)?;
        if !report.passed {
            failed += 1;
        }
        out.write_all(report.render().as_bytes()).map_err(io_err)?;
    }
    line(out, format!("SUMMARY passed={} failed={failed} seed={seed}", ids.len() - failed))?;
    if failed > 0 {
        return Err(CliError::new("ScenarioFailed", format!("{failed} scenario(s) failed")));
    }
    Ok(())
}
