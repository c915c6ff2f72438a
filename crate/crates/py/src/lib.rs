//! Python bindings. Records cross the boundary as canonical JSON text;
//! callers use `json.loads` / `json.dumps` on their side.

use chrono::{DateTime, Utc};
use labelloop::canonical::{from_canonical, to_canonical};
use labelloop::deid::{deidentify_study, pseudonymize, verify_deidentified, DeidPolicy, SiteSecret};
use labelloop::feedback::{match_detections, score_study, AlgorithmOutput, MatchConfig};
use labelloop::ingest::{decode_envelope, encode_envelope, EnvelopeKind, Envelope, FileStore, MemoryStore, Payload};
use labelloop::monitor::{MonitorConfig, StreamKey};
use labelloop::registry::{verify_audit_file, AuditVerdict};
use labelloop::report::{build_report, extract_labels, parse_report, InteractiveReport, LabelSet};
use labelloop::sim::{run_scenario_with, ScenarioConfig};
use labelloop::StudyRecord;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::PathBuf;
use std::sync::Arc;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn load<T: DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(value_err)
}

fn dump<T: Serialize>(v: &T) -> PyResult<String> {
    to_canonical(v).map_err(value_err)
}

fn timestamp(text: &str) -> PyResult<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(text).map(|t| t.with_timezone(&Utc)).map_err(value_err)
}

fn secret(hex: Option<&str>) -> PyResult<SiteSecret> {
    match hex {
        Some(h) => SiteSecret::from_hex(h).map_err(value_err),
        None => SiteSecret::from_env().map_err(value_err)?.ok_or_else(|| {
            PyValueError::new_err("no secret given and LABELLOOP_SITE_SECRET is not set")
        }),
    }
}

/// Canonical single-line form of a JSON record.
#[pyfunction]
fn canonical(record: &str) -> PyResult<String> {
    let v: serde_json::Value = load(record)?;
    dump(&v)
}

/// SHA-256 hex digest of the canonical form.
#[pyfunction]
fn digest(record: &str) -> PyResult<String> {
    let v: serde_json::Value = load(record)?;
    Ok(labelloop::canonical_digest(&v).as_str().to_owned())
}

/// Parses a raw report (header line plus body) against a study.
#[pyfunction]
fn parse_report_text(raw: &str, study: &str) -> PyResult<String> {
    let study: StudyRecord = load(study)?;
    dump(&parse_report(raw, &study).map_err(value_err)?)
}

#[pyfunction]
fn build_report_text(report_uid: &str, study: &str, author_id: &str, authored_at: &str, body: String) -> PyResult<String> {
    let study: StudyRecord = load(study)?;
    dump(&build_report(report_uid, &study, author_id, timestamp(authored_at)?, body).map_err(value_err)?)
}

#[pyfunction(name = "extract_labels")]
fn extract_labels_py(report: &str) -> PyResult<String> {
    let report: InteractiveReport = load(report)?;
    dump(&extract_labels(&report))
}

#[pyfunction(name = "pseudonymize", signature = (scope, value, secret_hex=None))]
fn pseudonymize_py(scope: &str, value: &str, secret_hex: Option<&str>) -> PyResult<String> {
    pseudonymize(&secret(secret_hex)?, scope, value).map_err(value_err)
}

/// De-identifies a study and its reports with the standard policy.
/// Returns `{"study", "reports", "receipt"}`.
#[pyfunction(signature = (study, reports, performed_at, secret_hex=None))]
fn deidentify(study: &str, reports: &str, performed_at: &str, secret_hex: Option<&str>) -> PyResult<String> {
    let study: StudyRecord = load(study)?;
    let reports: Vec<InteractiveReport> = load(reports)?;
    let policy = DeidPolicy::standard(secret(secret_hex)?);
    let out = deidentify_study(&study, &reports, &policy, timestamp(performed_at)?).map_err(value_err)?;
    verify_deidentified(&out.study, &out.reports, &study.identity.phi_tokens)
        .map_err(|leaks| PyValueError::new_err(format!("{} PHI leaks after de-identification", leaks.len())))?;
    dump(&serde_json::json!({ "study": out.study, "reports": out.reports, "receipt": out.receipt }))
}

fn payload(kind: &str, record: &str) -> PyResult<Payload> {
    let kind: EnvelopeKind = load(&format!("\"{kind}\""))?;
    Payload::decode(kind, &dump(&load::<serde_json::Value>(record)?)?).map_err(value_err)
}

/// Seals a payload of `kind` (STUDY, REPORT, LABELSET, ALG_OUTPUT, ALERT_ACK).
#[pyfunction]
fn seal(site_id: &str, kind: &str, record: &str, created_at: &str) -> PyResult<String> {
    dump(&Envelope::seal(site_id, &payload(kind, record)?, timestamp(created_at)?).map_err(value_err)?)
}

/// Length-prefixed wire frame of an envelope.
#[pyfunction]
fn encode<'py>(py: Python<'py>, envelope: &str) -> PyResult<Bound<'py, PyBytes>> {
    let e: Envelope = load(envelope)?;
    Ok(PyBytes::new(py, &encode_envelope(&e)))
}

#[pyfunction]
fn decode(frame: &[u8]) -> PyResult<String> {
    dump(&decode_envelope(frame).map_err(value_err)?)
}

/// Matches and scores one algorithm output against a label set.
#[pyfunction(signature = (output, labels, site_id, ordinal=0, iou_threshold=None))]
fn score(output: &str, labels: &str, site_id: &str, ordinal: u64, iou_threshold: Option<f64>) -> PyResult<String> {
    let out: AlgorithmOutput = load(output)?;
    let labels: LabelSet = load(labels)?;
    let mut cfg = MatchConfig::default();
    if let Some(t) = iou_threshold {
        cfg.iou_threshold = t;
    }
    let m = match_detections(&out, &labels.labels, &cfg).map_err(value_err)?;
    dump(&score_study(&m, &out, &labels.labels, site_id, ordinal, &cfg))
}

/// Returns `(ok, entries_or_broken_seq)`.
#[pyfunction]
fn verify_audit(log_path: PathBuf) -> PyResult<(bool, u64)> {
    match verify_audit_file(&log_path).map_err(|e| PyIOError::new_err(e.to_string()))? {
        AuditVerdict::Ok { entries } => Ok((true, entries)),
        AuditVerdict::Broken { seq } => Ok((false, seq)),
    }
}

/// Runs a scenario and returns the bundle as `{file name: bytes}`. Writes
/// the bundle too when `out_dir` is given.
#[pyfunction(signature = (scenario, seed=None, out_dir=None))]
fn simulate<'py>(
    py: Python<'py>,
    scenario: &str,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = ScenarioConfig::from_text(scenario).map_err(value_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let env_secret = SiteSecret::from_env().map_err(value_err)?;
    let bundle = py.detach(|| run_scenario_with(&cfg, env_secret.as_ref())).map_err(value_err)?;
    if let Some(dir) = out_dir {
        bundle.write(&dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    }
    let files = PyDict::new(py);
    for (name, bytes) in bundle.files() {
        files.set_item(name, PyBytes::new(py, &bytes))?;
    }
    Ok(files)
}

/// Central ingest point backed by memory or by a store directory.
#[pyclass]
struct Hub(labelloop::ingest::Hub);

#[pymethods]
impl Hub {
    #[new]
    #[pyo3(signature = (store_dir=None))]
    fn new(store_dir: Option<PathBuf>) -> PyResult<Self> {
        let store: Arc<dyn labelloop::ingest::EnvelopeStore> = match store_dir {
            Some(d) => Arc::new(FileStore::open(d).map_err(|e| PyIOError::new_err(e.to_string()))?),
            None => Arc::new(MemoryStore::new()),
        };
        Ok(Hub(labelloop::ingest::Hub::new(store)))
    }

    /// Ingests one envelope; returns the ack record.
    fn ingest(&self, envelope: &str) -> PyResult<String> {
        let e: Envelope = load(envelope)?;
        dump(&self.0.ingest(&e).map_err(|e| PyIOError::new_err(e.to_string()))?)
    }

    fn __len__(&self) -> PyResult<usize> {
        Ok(self.0.store().envelopes().map_err(|e| PyIOError::new_err(e.to_string()))?.len())
    }
}

/// Per-(site, algorithm, version) agreement monitor.
#[pyclass]
struct AgreementStream(labelloop::monitor::AgreementStream);

#[pymethods]
impl AgreementStream {
    #[new]
    #[pyo3(signature = (site_id, algorithm_id, version, config=None))]
    fn new(site_id: &str, algorithm_id: &str, version: &str, config: Option<&str>) -> PyResult<Self> {
        let cfg: MonitorConfig = config.map(load).transpose()?.unwrap_or_default();
        Ok(AgreementStream(labelloop::monitor::AgreementStream::new(StreamKey::new(site_id, algorithm_id, version), cfg)))
    }

    /// Feeds one event; returns the alert record when the detector fires.
    fn observe(&mut self, agree: bool, raised_at: &str) -> PyResult<Option<String>> {
        self.0.observe_event(agree, timestamp(raised_at)?).map(|a| dump(&a)).transpose()
    }

    /// Feeds every event of a study agreement record.
    fn observe_study(&mut self, agreement: &str, raised_at: &str) -> PyResult<Vec<String>> {
        let a = from_canonical(&dump(&load::<serde_json::Value>(agreement)?)?).map_err(value_err)?;
        labelloop::monitor::observe_study(&mut self.0, &a, timestamp(raised_at)?)
            .map_err(value_err)?
            .iter()
            .map(dump)
            .collect()
    }

    #[getter]
    fn p0(&self) -> Option<f64> {
        self.0.p0
    }

    #[getter]
    fn s_plus(&self) -> f64 {
        self.0.cusum.s_plus
    }

    #[getter]
    fn events(&self) -> u64 {
        self.0.events
    }
}

#[pymodule]
fn labelloop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(canonical, m)?)?;
    m.add_function(wrap_pyfunction!(digest, m)?)?;
    m.add_function(wrap_pyfunction!(parse_report_text, m)?)?;
    m.add_function(wrap_pyfunction!(build_report_text, m)?)?;
    m.add_function(wrap_pyfunction!(extract_labels_py, m)?)?;
    m.add_function(wrap_pyfunction!(pseudonymize_py, m)?)?;
    m.add_function(wrap_pyfunction!(deidentify, m)?)?;
    m.add_function(wrap_pyfunction!(seal, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(verify_audit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_class::<Hub>()?;
    m.add_class::<AgreementStream>()?;
    Ok(())
}
