//! Site to hub wire contract: typed envelopes, length-prefixed frames,
//! idempotent ingestion and the client retry loop.

use crate::canonical::{from_canonical, sha256_hex, to_canonical, CanonicalError};
use crate::feedback::{AlgorithmOutput, Execution};
use crate::model::{validate_study, StudyRecord, Violation};
use crate::monitor::AlertAck;
use crate::report::{parse_anchors, InteractiveReport, LabelSet};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_FRAME_LEN: usize = 64 << 20;
pub const SPOOL_SUFFIX: &str = ".env.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EnvelopeKind {
    Study,
    Report,
    Labelset,
    AlgOutput,
    AlertAck,
}

impl EnvelopeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvelopeKind::Study => "STUDY",
            EnvelopeKind::Report => "REPORT",
            EnvelopeKind::Labelset => "LABELSET",
            EnvelopeKind::AlgOutput => "ALG_OUTPUT",
            EnvelopeKind::AlertAck => "ALERT_ACK",
        }
    }
}

/// Inner record carried by an envelope.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Study(StudyRecord),
    Report(InteractiveReport),
    LabelSet(LabelSet),
    AlgOutput(AlgorithmOutput),
    AlertAck(AlertAck),
}

impl Payload {
    pub fn kind(&self) -> EnvelopeKind {
        match self {
            Payload::Study(_) => EnvelopeKind::Study,
            Payload::Report(_) => EnvelopeKind::Report,
            Payload::LabelSet(_) => EnvelopeKind::Labelset,
            Payload::AlgOutput(_) => EnvelopeKind::AlgOutput,
            Payload::AlertAck(_) => EnvelopeKind::AlertAck,
        }
    }

    pub fn primary_uid(&self) -> String {
        match self {
            Payload::Study(s) => s.study_uid.clone(),
            Payload::Report(r) => r.report_uid.clone(),
            Payload::LabelSet(l) => l.report_uid.clone(),
            Payload::AlgOutput(o) => o.primary_uid(),
            Payload::AlertAck(a) => format!("{}:{}", a.alert_id, a.site_id),
        }
    }

    pub fn to_canonical(&self) -> Result<String, CanonicalError> {
        match self {
            Payload::Study(s) => to_canonical(s),
            Payload::Report(r) => to_canonical(r),
            Payload::LabelSet(l) => to_canonical(l),
            Payload::AlgOutput(o) => to_canonical(o),
            Payload::AlertAck(a) => to_canonical(a),
        }
    }

    pub fn decode(kind: EnvelopeKind, text: &str) -> Result<Self, CanonicalError> {
        Ok(match kind {
            EnvelopeKind::Study => Payload::Study(from_canonical(text)?),
            EnvelopeKind::Report => Payload::Report(from_canonical(text)?),
            EnvelopeKind::Labelset => Payload::LabelSet(from_canonical(text)?),
            EnvelopeKind::AlgOutput => Payload::AlgOutput(from_canonical(text)?),
            EnvelopeKind::AlertAck => Payload::AlertAck(from_canonical(text)?),
        })
    }

    /// The record's own validation rules.
    pub fn violations(&self, site_id: &str) -> Vec<Violation> {
        match self {
            Payload::Study(s) => {
                let mut v = validate_study(s).err().unwrap_or_default();
                if s.site_id != site_id {
                    v.push(Violation::new("site_id", "matches envelope site_id"));
                }
                v
            }
            Payload::Report(r) => match parse_anchors(&r.body) {
                Ok(a) if a == r.anchors => vec![],
                Ok(_) => vec![Violation::new("anchors", "match anchors parsed from body")],
                Err(e) => vec![Violation::new("body", e.to_string())],
            },
            Payload::LabelSet(l) => {
                let mut v = Vec::new();
                for (i, label) in l.labels.iter().enumerate() {
                    if label.report_uid != l.report_uid || label.study_uid != l.study_uid {
                        v.push(Violation::new(format!("labels[{i}]"), "belongs to the label set's report"));
                    }
                    v.extend(label.violations(&format!("labels[{i}]")));
                }
                v
            }
            Payload::AlgOutput(o) => o.violations(),
            Payload::AlertAck(a) => {
                let mut v = Vec::new();
                if a.alert_id.is_empty() {
                    v.push(Violation::new("alert_id", "identifier nonempty"));
                }
                if a.site_id != site_id {
                    v.push(Violation::new("site_id", "matches envelope site_id"));
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub envelope_id: String,
    pub site_id: String,
    pub kind: EnvelopeKind,
    pub schema_version: u32,
    pub idempotency_key: String,
    pub payload: String,
    pub payload_digest: String,
    pub created_at: DateTime<Utc>,
}

pub fn idempotency_key(site_id: &str, kind: EnvelopeKind, uid: &str) -> String {
    format!("{site_id}/{}/{uid}", kind.as_str())
}

impl Envelope {
    pub fn seal(site_id: &str, payload: &Payload, created_at: DateTime<Utc>) -> Result<Self, CanonicalError> {
        let body = payload.to_canonical()?;
        let payload_digest = sha256_hex(body.as_bytes());
        let key = idempotency_key(site_id, payload.kind(), &payload.primary_uid());
        let envelope_id = format!("env-{}", &sha256_hex(format!("{key}\n{payload_digest}").as_bytes())[..24]);
        Ok(Envelope {
            envelope_id,
            site_id: site_id.to_owned(),
            kind: payload.kind(),
            schema_version: SCHEMA_VERSION,
            idempotency_key: key,
            payload: body,
            payload_digest,
            created_at,
        })
    }

    pub fn digest_ok(&self) -> bool {
        sha256_hex(self.payload.as_bytes()) == self.payload_digest
    }

    pub fn open(&self) -> Result<Payload, CanonicalError> {
        Payload::decode(self.kind, &self.payload)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated")]
    Truncated,
    #[error("frame length {0} exceeds limit")]
    TooLarge(usize),
    #[error("frame body is not a valid envelope: {0}")]
    Malformed(String),
    #[error("unsupported schema_version {0}")]
    Version(u64),
    #[error("integrity error: payload digest mismatch")]
    Integrity,
}

pub fn envelope_line(e: &Envelope) -> String {
    to_canonical(e).expect("envelopes always have a canonical form")
}

pub fn encode_envelope(e: &Envelope) -> Vec<u8> {
    let body = envelope_line(e);
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(body.as_bytes());
    frame
}

pub fn decode_envelope(frame: &[u8]) -> Result<Envelope, FrameError> {
    if frame.len() < 4 {
        return Err(FrameError::Truncated);
    }
    let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    if frame.len() - 4 != len {
        return Err(FrameError::Truncated);
    }
    decode_body(&frame[4..])
}

/// Decodes one envelope body (a frame without its prefix, or a spool line).
pub fn decode_body(body: &[u8]) -> Result<Envelope, FrameError> {
    let text = std::str::from_utf8(body).map_err(|e| FrameError::Malformed(e.to_string()))?;
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| FrameError::Malformed(e.to_string()))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(FrameError::Version(v)),
        None => return Err(FrameError::Malformed("schema_version missing".into())),
    }
    let e: Envelope = serde_json::from_value(value).map_err(|e| FrameError::Malformed(e.to_string()))?;
    if !e.digest_ok() {
        return Err(FrameError::Integrity);
    }
    Ok(e)
}

fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut frame = Vec::with_capacity(4 + n);
    frame.extend_from_slice(&len);
    frame.resize(4 + n, 0);
    r.read_exact(&mut frame[4..])?;
    Ok(Some(frame))
}

fn write_frame<W: Write>(w: &mut W, body: &str) -> io::Result<()> {
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body.as_bytes())?;
    w.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AckStatus {
    Accepted,
    Duplicate,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub envelope_id: String,
    pub status: AckStatus,
    pub reason: Option<String>,
}

impl Ack {
    fn new(e: &Envelope, status: AckStatus, reason: Option<String>) -> Self {
        Ack { envelope_id: e.envelope_id.clone(), status, reason }
    }

    fn rejected(e: &Envelope, reason: impl Into<String>) -> Self {
        Self::new(e, AckStatus::Rejected, Some(reason.into()))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("store unavailable: {0}")]
pub struct StoreError(pub String);

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError(e.to_string())
    }
}

pub enum PutOutcome {
    Inserted,
    Existing(Envelope),
}

/// Persistence behind the hub. `put_if_absent` must be atomic per key.
pub trait EnvelopeStore: Send + Sync {
    fn put_if_absent(&self, e: &Envelope) -> Result<PutOutcome, StoreError>;
    fn get(&self, key: &str) -> Result<Option<Envelope>, StoreError>;
    fn envelopes(&self) -> Result<Vec<Envelope>, StoreError>;
}

#[derive(Default)]
pub struct MemoryStore {
    inner: Mutex<BTreeMap<String, Envelope>>,
    writes: AtomicU64,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn writes(&self) -> u64 {
        self.writes.load(Ordering::SeqCst)
    }
}

impl EnvelopeStore for MemoryStore {
    fn put_if_absent(&self, e: &Envelope) -> Result<PutOutcome, StoreError> {
        let mut map = self.inner.lock().unwrap();
        if let Some(old) = map.get(&e.idempotency_key) {
            return Ok(PutOutcome::Existing(old.clone()));
        }
        map.insert(e.idempotency_key.clone(), e.clone());
        self.writes.fetch_add(1, Ordering::SeqCst);
        Ok(PutOutcome::Inserted)
    }

    fn get(&self, key: &str) -> Result<Option<Envelope>, StoreError> {
        Ok(self.inner.lock().unwrap().get(key).cloned())
    }

    fn envelopes(&self) -> Result<Vec<Envelope>, StoreError> {
        Ok(self.inner.lock().unwrap().values().cloned().collect())
    }
}

/// One file per idempotency key. A new record is written to a private temp
/// file and hard-linked into place, which fails if the key already exists.
pub struct FileStore {
    dir: PathBuf,
    seq: AtomicU64,
}

impl FileStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("tmp"))?;
        Ok(FileStore { dir, seq: AtomicU64::new(0) })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{}.env", sha256_hex(key.as_bytes())))
    }

    fn load(path: &Path) -> Result<Envelope, StoreError> {
        let text = fs::read_to_string(path)?;
        from_canonical(text.trim_end()).map_err(|e| StoreError(format!("{}: {e}", path.display())))
    }
}

impl EnvelopeStore for FileStore {
    fn put_if_absent(&self, e: &Envelope) -> Result<PutOutcome, StoreError> {
        let target = self.path_for(&e.idempotency_key);
        if target.exists() {
            return Ok(PutOutcome::Existing(Self::load(&target)?));
        }
        let n = self.seq.fetch_add(1, Ordering::SeqCst);
        let tmp = self.dir.join("tmp").join(format!("{}-{n}", std::process::id()));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(envelope_line(e).as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_all()?;
        let linked = fs::hard_link(&tmp, &target);
        fs::remove_file(&tmp)?;
        match linked {
            Ok(()) => Ok(PutOutcome::Inserted),
            Err(err) if err.kind() == io::ErrorKind::AlreadyExists => Ok(PutOutcome::Existing(Self::load(&target)?)),
            Err(err) => Err(err.into()),
        }
    }

    fn get(&self, key: &str) -> Result<Option<Envelope>, StoreError> {
        let p = self.path_for(key);
        if p.exists() {
            Self::load(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    fn envelopes(&self) -> Result<Vec<Envelope>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let p = entry?.path();
            if p.extension().is_some_and(|x| x == "env") {
                out.push(Self::load(&p)?);
            }
        }
        out.sort_by(|a, b| a.idempotency_key.cmp(&b.idempotency_key));
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualExecution {
    pub site_id: String,
    pub study_uid: String,
    pub algorithm_id: String,
    pub version: String,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("transient: {0}")]
    Transient(#[from] StoreError),
}

pub struct Hub {
    store: Arc<dyn EnvelopeStore>,
    dual: Mutex<Vec<DualExecution>>,
}

impl Hub {
    pub fn new(store: Arc<dyn EnvelopeStore>) -> Self {
        Hub { store, dual: Mutex::new(Vec::new()) }
    }

    pub fn store(&self) -> &Arc<dyn EnvelopeStore> {
        &self.store
    }

    /// Algorithm outputs of one study that arrived from both origins.
    /// Both copies are kept under their own keys.
    pub fn dual_executions(&self) -> Vec<DualExecution> {
        self.dual.lock().unwrap().clone()
    }

    pub fn ingest(&self, e: &Envelope) -> Result<Ack, IngestError> {
        if e.schema_version != SCHEMA_VERSION {
            return Ok(Ack::rejected(e, format!("unsupported schema_version {}", e.schema_version)));
        }
        if !e.digest_ok() {
            return Ok(Ack::rejected(e, "integrity error: payload digest mismatch"));
        }
        let payload = match e.open() {
            Ok(p) => p,
            Err(err) => return Ok(Ack::rejected(e, format!("malformed payload: {err}"))),
        };
        if payload.to_canonical().ok().as_deref() != Some(e.payload.as_str()) {
            return Ok(Ack::rejected(e, "payload is not in canonical form"));
        }
        if e.idempotency_key != idempotency_key(&e.site_id, e.kind, &payload.primary_uid()) {
            return Ok(Ack::rejected(e, "idempotency_key does not match payload"));
        }
        let violations = payload.violations(&e.site_id);
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Ok(Ack::rejected(e, list.join("; ")));
        }
        match self.store.put_if_absent(e)? {
            PutOutcome::Inserted => {
                let reason = match &payload {
                    Payload::AlgOutput(o) => self.check_dual(&e.site_id, o)?,
                    _ => None,
                };
                Ok(Ack::new(e, AckStatus::Accepted, reason))
            }
            PutOutcome::Existing(old) if old.payload_digest == e.payload_digest => {
                Ok(Ack::new(e, AckStatus::Duplicate, None))
            }
            PutOutcome::Existing(_) => Ok(Ack::rejected(e, "idempotency conflict")),
        }
    }

    fn check_dual(&self, site_id: &str, o: &AlgorithmOutput) -> Result<Option<String>, StoreError> {
        let other = AlgorithmOutput {
            executed: match o.executed {
                Execution::Local => Execution::Central,
                Execution::Central => Execution::Local,
            },
            detections: vec![],
            ..o.clone()
        };
        let key = idempotency_key(site_id, EnvelopeKind::AlgOutput, &other.primary_uid());
        if self.store.get(&key)?.is_none() {
            return Ok(None);
        }
        self.dual.lock().unwrap().push(DualExecution {
            site_id: site_id.to_owned(),
            study_uid: o.study_uid.clone(),
            algorithm_id: o.algorithm_id.clone(),
            version: o.version.clone(),
        });
        Ok(Some("dual execution".into()))
    }

    /// Ingests every `*.env.jsonl` file in `dir` in file-name order.
    /// Lines that fail to decode yield `Err` entries in place of an Ack.
    pub fn ingest_spool(&self, dir: &Path) -> Result<Vec<Result<Ack, FrameError>>, IngestError> {
        let mut out = Vec::new();
        for line in read_spool(dir).map_err(StoreError::from)? {
            match line {
                Ok(e) => out.push(Ok(self.ingest(&e)?)),
                Err(err) => out.push(Err(err)),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("fatal: {0}")]
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, e: &Envelope) -> Result<Ack, TransportError>;
}

/// In-process delivery straight to a hub.
pub struct LocalTransport(pub Arc<Hub>);

impl Transport for LocalTransport {
    fn send(&self, e: &Envelope) -> Result<Ack, TransportError> {
        self.0.ingest(e).map_err(|err| TransportError::Transient(err.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "SCREAMING_SNAKE_CASE")]
enum Reply {
    Ack { ack: Ack },
    Transient { reason: String },
    BadFrame { reason: String },
}

/// One connection per send, framed both ways.
pub struct TcpTransport {
    pub addr: String,
    pub timeout: Duration,
}

impl Transport for TcpTransport {
    fn send(&self, e: &Envelope) -> Result<Ack, TransportError> {
        let transient = |err: io::Error| TransportError::Transient(err.to_string());
        let mut stream = TcpStream::connect(&self.addr).map_err(transient)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(transient)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(transient)?;
        stream.write_all(&encode_envelope(e)).map_err(transient)?;
        let _ = stream.shutdown(Shutdown::Write);
        let frame = read_frame(&mut stream)
            .map_err(transient)?
            .ok_or_else(|| TransportError::Transient("connection closed".into()))?;
        let reply: Reply =
            serde_json::from_slice(&frame[4..]).map_err(|err| TransportError::Fatal(err.to_string()))?;
        match reply {
            Reply::Ack { ack } => Ok(ack),
            Reply::Transient { reason } => Err(TransportError::Transient(reason)),
            Reply::BadFrame { reason } => Err(TransportError::Fatal(reason)),
        }
    }
}

fn handle_connection(hub: &Hub, mut stream: TcpStream) -> io::Result<()> {
    while let Some(frame) = read_frame(&mut stream)? {
        let reply = match decode_envelope(&frame) {
            Ok(e) => match hub.ingest(&e) {
                Ok(ack) => Reply::Ack { ack },
                Err(err) => Reply::Transient { reason: err.to_string() },
            },
            Err(err) => Reply::BadFrame { reason: err.to_string() },
        };
        write_frame(&mut stream, &to_canonical(&reply).expect("replies serialize"))?;
    }
    Ok(())
}

/// Accepts connections until `stop` is set, one thread per connection.
pub fn serve_tcp(listener: TcpListener, hub: Arc<Hub>, stop: Arc<AtomicBool>) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let hub = hub.clone();
                thread::spawn(move || {
                    let _ = handle_connection(&hub, stream);
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(1)),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { base: Duration::from_millis(100), factor: 2, max_attempts: 5 }
    }
}

impl RetryPolicy {
    /// Delay before attempt `n + 1`, for `n >= 1`.
    pub fn backoff(&self, n: u32) -> Duration {
        self.base * self.factor.pow(n - 1)
    }
}

pub trait Sleeper {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        thread::sleep(d);
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("undelivered envelopes: {}", undelivered.join(", "))]
pub struct DeliveryError {
    pub undelivered: Vec<String>,
    /// Acks for every envelope, `None` where delivery failed.
    pub acks: Vec<Option<Ack>>,
}

/// Sends each envelope in order, retrying transient failures. Every
/// envelope is attempted even after an earlier one fails.
pub fn submit_batch(
    client: &dyn Transport,
    envelopes: &[Envelope],
    policy: &RetryPolicy,
    sleeper: &dyn Sleeper,
) -> Result<Vec<Ack>, DeliveryError> {
    let mut acks = Vec::with_capacity(envelopes.len());
    for e in envelopes {
        let mut delivered = None;
        for attempt in 1..=policy.max_attempts {
            match client.send(e) {
                Ok(ack) => {
                    delivered = Some(ack);
                    break;
                }
                Err(TransportError::Fatal(_)) => break,
                Err(TransportError::Transient(_)) if attempt < policy.max_attempts => {
                    sleeper.sleep(policy.backoff(attempt))
                }
                Err(TransportError::Transient(_)) => {}
            }
        }
        acks.push(delivered);
    }
    if acks.iter().all(Option::is_some) {
        return Ok(acks.into_iter().flatten().collect());
    }
    let undelivered =
        envelopes.iter().zip(&acks).filter(|(_, a)| a.is_none()).map(|(e, _)| e.envelope_id.clone()).collect();
    Err(DeliveryError { undelivered, acks })
}

/// Writes `<name>.env.jsonl` into `dir`, one canonical envelope per line.
pub fn write_spool(dir: &Path, name: &str, envelopes: &[Envelope]) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}{SPOOL_SUFFIX}"));
    let mut w = io::BufWriter::new(fs::File::create(&path)?);
    for e in envelopes {
        writeln!(w, "{}", envelope_line(e))?;
    }
    w.flush()?;
    Ok(path)
}

pub fn read_spool(dir: &Path) -> io::Result<Vec<Result<Envelope, FrameError>>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    files.retain(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(SPOOL_SUFFIX)));
    files.sort();
    let mut out = Vec::new();
    for p in files {
        for line in io::BufReader::new(fs::File::open(&p)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(decode_body(line.as_bytes()));
            }
        }
    }
    Ok(out)
}
