//! Drift surveillance of deployed algorithms: a Bernoulli CUSUM over the
//! per-finding agreement stream (internal drift), a chi-square test of
//! finding prevalence (external drift), and fan-out of alerts to every site
//! running the affected version.

use crate::canonical::{from_canonical, sha256_hex, to_canonical};
use crate::feedback::StudyAgreement;
use crate::model::FindingCode;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub const PREVALENCE_BINS: usize = FindingCode::ALL.len() + 1;
const NO_FINDING_BIN: usize = FindingCode::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub k: f64,
    pub h: f64,
    /// Calibration length in agreement events.
    pub n0: u64,
    /// Ring size of recent agreement outcomes.
    pub window: usize,
    /// Calibration length of the prevalence profile in studies.
    pub prevalence_n0: u64,
    pub prevalence_window: u64,
    pub alpha: f64,
    /// Window agreement below `p0 - critical_margin` makes an alert CRITICAL.
    pub critical_margin: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            k: 0.05,
            h: 10.0,
            n0: 500,
            window: 200,
            prevalence_n0: 500,
            prevalence_window: 200,
            alpha: 0.001,
            critical_margin: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumState {
    pub s_plus: f64,
    pub k: f64,
    pub h: f64,
}

impl CusumState {
    pub fn new(k: f64, h: f64) -> Self {
        CusumState { s_plus: 0.0, k, h }
    }
}

/// One step of the lower-side Bernoulli CUSUM. Resets to zero on fire.
pub fn cusum_step(state: CusumState, x: bool, p0: f64) -> (CusumState, bool) {
    let x = if x { 1.0 } else { 0.0 };
    let s = (state.s_plus + (p0 - x) - state.k).max(0.0);
    let fired = s > state.h;
    (CusumState { s_plus: if fired { 0.0 } else { s }, ..state }, fired)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StreamKey {
    pub site_id: String,
    pub algorithm_id: String,
    pub version: String,
}

impl StreamKey {
    pub fn new(site_id: &str, algorithm_id: &str, version: &str) -> Self {
        StreamKey { site_id: site_id.into(), algorithm_id: algorithm_id.into(), version: version.into() }
    }

    pub fn of(a: &StudyAgreement) -> Self {
        Self::new(&a.site_id, &a.algorithm_id, &a.version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertKind {
    InternalDrift,
    ExternalDrift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Warn,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub statistic: String,
    pub value: f64,
    pub threshold: f64,
    /// Detector parameters and context at the time of firing.
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: String,
    pub kind: AlertKind,
    pub key: StreamKey,
    pub severity: Severity,
    pub evidence: Evidence,
    pub raised_at: DateTime<Utc>,
}

fn alert_id(kind: AlertKind, key: &StreamKey, position: u64) -> String {
    let seed = format!("{kind:?}\n{}\n{}\n{}\n{position}", key.site_id, key.algorithm_id, key.version);
    format!("alert-{}", &sha256_hex(seed.as_bytes())[..16])
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MonitorError {
    #[error("agreement for {found:?} fed to stream {expected:?}")]
    KeyMismatch { expected: StreamKey, found: StreamKey },
}

/// Agreement outcomes of one (site, algorithm, version).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStream {
    pub key: StreamKey,
    pub config: MonitorConfig,
    pub calibration_events: u64,
    pub calibration_successes: u64,
    pub p0: Option<f64>,
    pub cusum: CusumState,
    pub window: VecDeque<bool>,
    /// Events seen, calibration included.
    pub events: u64,
}

impl AgreementStream {
    pub fn new(key: StreamKey, config: MonitorConfig) -> Self {
        AgreementStream {
            key,
            config,
            calibration_events: 0,
            calibration_successes: 0,
            p0: None,
            cusum: CusumState::new(config.k, config.h),
            window: VecDeque::with_capacity(config.window),
            events: 0,
        }
    }

    pub fn window_rate(&self) -> Option<f64> {
        (!self.window.is_empty()).then(|| self.window.iter().filter(|x| **x).count() as f64 / self.window.len() as f64)
    }

    /// Feeds one Bernoulli event; returns an alert if the CUSUM fired.
    pub fn observe_event(&mut self, x: bool, raised_at: DateTime<Utc>) -> Option<Alert> {
        self.events += 1;
        if self.window.len() == self.config.window {
            self.window.pop_front();
        }
        self.window.push_back(x);
        let Some(p0) = self.p0 else {
            self.calibration_events += 1;
            self.calibration_successes += x as u64;
            if self.calibration_events >= self.config.n0 {
                let n = self.calibration_events as f64;
                // keeps p0 inside (0,1] when calibration saw no agreement at all
                self.p0 = Some((self.calibration_successes as f64).max(0.5) / n);
            }
            return None;
        };
        let before = self.cusum.s_plus;
        let (next, fired) = cusum_step(self.cusum, x, p0);
        self.cusum = next;
        if !fired {
            return None;
        }
        let statistic = (before + (p0 - if x { 1.0 } else { 0.0 }) - self.cusum.k).max(0.0);
        let rate = self.window_rate().unwrap_or(p0);
        let severity = if rate < p0 - self.config.critical_margin { Severity::Critical } else { Severity::Warn };
        let params = BTreeMap::from([
            ("k".to_owned(), self.cusum.k),
            ("p0".to_owned(), p0),
            ("window_rate".to_owned(), rate),
            ("window_len".to_owned(), self.window.len() as f64),
            ("event".to_owned(), self.events as f64),
        ]);
        Some(Alert {
            alert_id: alert_id(AlertKind::InternalDrift, &self.key, self.events),
            kind: AlertKind::InternalDrift,
            key: self.key.clone(),
            severity,
            evidence: Evidence { statistic: "cusum_s_plus".into(), value: statistic, threshold: self.cusum.h, params },
            raised_at,
        })
    }
}

/// Per-finding Bernoulli events of one study: a pair is 1, a false
/// positive or false negative is 0, unverified detections are dropped.
pub fn agreement_events(a: &StudyAgreement) -> Vec<bool> {
    let mut out = Vec::new();
    for c in a.by_finding.values() {
        out.extend(std::iter::repeat_n(true, c.tp as usize));
        out.extend(std::iter::repeat_n(false, (c.fp + c.fn_) as usize));
    }
    out
}

pub fn observe_study(
    stream: &mut AgreementStream,
    agreement: &StudyAgreement,
    raised_at: DateTime<Utc>,
) -> Result<Vec<Alert>, MonitorError> {
    let found = StreamKey::of(agreement);
    if found != stream.key {
        return Err(MonitorError::KeyMismatch { expected: stream.key.clone(), found });
    }
    Ok(agreement_events(agreement).into_iter().filter_map(|x| stream.observe_event(x, raised_at)).collect())
}

/// Histogram over the six codes plus "no finding", counted per study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceProfile {
    pub key: StreamKey,
    pub config: MonitorConfig,
    pub calibration: [u64; PREVALENCE_BINS],
    pub calibration_studies: u64,
    pub window: [u64; PREVALENCE_BINS],
    pub window_studies: u64,
    /// Closed windows so far.
    pub windows: u64,
}

impl PrevalenceProfile {
    pub fn new(key: StreamKey, config: MonitorConfig) -> Self {
        PrevalenceProfile {
            key,
            config,
            calibration: [0; PREVALENCE_BINS],
            calibration_studies: 0,
            window: [0; PREVALENCE_BINS],
            window_studies: 0,
            windows: 0,
        }
    }

    pub fn calibrated(&self) -> bool {
        self.calibration_studies >= self.config.prevalence_n0
    }

    pub fn window_full(&self) -> bool {
        self.window_studies >= self.config.prevalence_window
    }

    /// Records the positive codes of one study. When a window fills it is
    /// tested and a fresh window starts.
    pub fn observe(&mut self, positives: &BTreeSet<FindingCode>, raised_at: DateTime<Utc>) -> Option<Alert> {
        let hist = if self.calibrated() { &mut self.window } else { &mut self.calibration };
        if positives.is_empty() {
            hist[NO_FINDING_BIN] += 1;
        }
        for c in positives {
            hist[c.index()] += 1;
        }
        if !self.calibrated() {
            self.calibration_studies += 1;
            return None;
        }
        self.window_studies += 1;
        if !self.window_full() {
            return None;
        }
        let alert = prevalence_shift_check(self, raised_at);
        self.window = [0; PREVALENCE_BINS];
        self.window_studies = 0;
        self.windows += 1;
        alert
    }
}

pub fn positive_codes(a: &StudyAgreement) -> BTreeSet<FindingCode> {
    a.by_finding.iter().filter(|(_, c)| c.tp + c.fn_ > 0).map(|(f, _)| *f).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub df: usize,
    pub threshold: f64,
}

/// Pearson goodness of fit of `observed` against proportions of
/// `reference`. Bins with expected count below 5 are pooled together; a
/// pool that is still below 5 joins the smallest remaining bin. `None`
/// when fewer than two bins remain.
pub fn chi_square_test(observed: &[u64], reference: &[u64], alpha: f64) -> Option<ChiSquareTest> {
    let n_obs: u64 = observed.iter().sum();
    let n_ref: u64 = reference.iter().sum();
    if n_obs == 0 || n_ref == 0 {
        return None;
    }
    let scale = n_obs as f64 / n_ref as f64;
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut pool = (0.0, 0.0);
    for (o, r) in observed.iter().zip(reference) {
        let e = *r as f64 * scale;
        if e < 5.0 {
            pool.0 += *o as f64;
            pool.1 += e;
        } else {
            bins.push((*o as f64, e));
        }
    }
    if pool.1 >= 5.0 {
        bins.push(pool);
    } else if pool.1 > 0.0 || pool.0 > 0.0 {
        let smallest = bins.iter_mut().min_by(|a, b| a.1.total_cmp(&b.1))?;
        smallest.0 += pool.0;
        smallest.1 += pool.1;
    }
    if bins.len() < 2 {
        return None;
    }
    let statistic = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let df = bins.len() - 1;
    let threshold = ChiSquared::new(df as f64).expect("df >= 1").inverse_cdf(1.0 - alpha);
    Some(ChiSquareTest { statistic, df, threshold })
}

pub fn prevalence_shift_check(profile: &PrevalenceProfile, raised_at: DateTime<Utc>) -> Option<Alert> {
    if !profile.calibrated() || !profile.window_full() {
        return None;
    }
    let t = chi_square_test(&profile.window, &profile.calibration, profile.config.alpha)?;
    if t.statistic <= t.threshold {
        return None;
    }
    let params = BTreeMap::from([
        ("alpha".to_owned(), profile.config.alpha),
        ("df".to_owned(), t.df as f64),
        ("window".to_owned(), profile.windows as f64),
        ("window_studies".to_owned(), profile.window_studies as f64),
    ]);
    Some(Alert {
        alert_id: alert_id(AlertKind::ExternalDrift, &profile.key, profile.windows),
        kind: AlertKind::ExternalDrift,
        key: profile.key.clone(),
        severity: Severity::Warn,
        evidence: Evidence { statistic: "chi_square".into(), value: t.statistic, threshold: t.threshold, params },
        raised_at,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "channel", content = "id", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Recipient {
    Site(String),
    Developer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub alert_id: String,
    pub recipient: Recipient,
    pub alert: Alert,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
#[error("deployment directory unavailable: {0}")]
pub struct DirectoryUnavailable(pub String);

/// Resolves the sites actively running a version.
pub trait DeploymentDirectory {
    fn list_sites_running(&self, algorithm_id: &str, version: &str) -> Result<BTreeSet<String>, DirectoryUnavailable>;
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum PropagateError {
    #[error("retriable: {0}")]
    Retriable(String),
}

impl From<DirectoryUnavailable> for PropagateError {
    fn from(e: DirectoryUnavailable) -> Self {
        PropagateError::Retriable(e.0)
    }
}

impl From<NotifyError> for PropagateError {
    fn from(e: NotifyError) -> Self {
        PropagateError::Retriable(e.to_string())
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum NotifyError {
    #[error("no callback configured for {0:?}")]
    NoRoute(Recipient),
    #[error("delivery failed: {0}")]
    Delivery(String),
}

pub trait Notifier {
    fn deliver(&self, n: &Notification) -> Result<(), NotifyError>;
}

/// In-process fan-out used by the simulator.
#[derive(Default)]
pub struct QueueNotifier {
    queue: Mutex<Vec<Notification>>,
}

impl QueueNotifier {
    pub fn drain(&self) -> Vec<Notification> {
        std::mem::take(&mut *self.queue.lock().unwrap())
    }

    pub fn snapshot(&self) -> Vec<Notification> {
        self.queue.lock().unwrap().clone()
    }
}

impl Notifier for QueueNotifier {
    fn deliver(&self, n: &Notification) -> Result<(), NotifyError> {
        self.queue.lock().unwrap().push(n.clone());
        Ok(())
    }
}

/// POSTs each notification as one canonical record to the recipient's URL.
pub struct HttpNotifier {
    pub callbacks: BTreeMap<Recipient, String>,
    agent: ureq::Agent,
}

impl HttpNotifier {
    pub fn new(callbacks: BTreeMap<Recipient, String>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(std::time::Duration::from_secs(10)).build();
        HttpNotifier { callbacks, agent }
    }
}

impl Notifier for HttpNotifier {
    fn deliver(&self, n: &Notification) -> Result<(), NotifyError> {
        let url = self.callbacks.get(&n.recipient).ok_or_else(|| NotifyError::NoRoute(n.recipient.clone()))?;
        let body = to_canonical(n).expect("notifications serialize");
        self.agent
            .post(url)
            .set("Content-Type", "application/json")
            .send_string(&body)
            .map_err(|e| NotifyError::Delivery(e.to_string()))?;
        Ok(())
    }
}

/// Fans alerts out at most once per alert_id.
#[derive(Debug, Default, Clone)]
pub struct Propagator {
    delivered: BTreeSet<String>,
}

impl Propagator {
    pub fn new() -> Self {
        Self::default()
    }

    /// One notification per site running the alert's version plus one for
    /// the developer channel. A repeated alert_id emits nothing. On error
    /// nothing is marked delivered, so the call can be retried; recipients
    /// must tolerate a repeat of notifications sent before the failure.
    pub fn propagate(
        &mut self,
        alert: &Alert,
        directory: &dyn DeploymentDirectory,
        notifier: &dyn Notifier,
    ) -> Result<Vec<Notification>, PropagateError> {
        if self.delivered.contains(&alert.alert_id) {
            return Ok(vec![]);
        }
        let sites = directory.list_sites_running(&alert.key.algorithm_id, &alert.key.version)?;
        let recipients = sites
            .into_iter()
            .map(Recipient::Site)
            .chain([Recipient::Developer(alert.key.algorithm_id.clone())]);
        let mut out = Vec::new();
        for recipient in recipients {
            let n = Notification { alert_id: alert.alert_id.clone(), recipient, alert: alert.clone() };
            notifier.deliver(&n)?;
            out.push(n);
        }
        self.delivered.insert(alert.alert_id.clone());
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertAck {
    pub alert_id: String,
    pub site_id: String,
    pub acknowledged_by: String,
    pub acknowledged_at: DateTime<Utc>,
}

/// Append-only file of canonical alert records, one per line.
pub struct AlertLog {
    path: PathBuf,
}

impl AlertLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        AlertLog { path: path.into() }
    }

    pub fn append(&self, alert: &Alert) -> io::Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{}", to_canonical(alert).expect("alerts serialize"))
    }

    pub fn read(path: &Path) -> io::Result<Vec<Alert>> {
        let f = fs::File::open(path)?;
        let mut out = Vec::new();
        for line in io::BufReader::new(f).lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            out.push(from_canonical(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::Counts;
    use chrono::TimeZone;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn t() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn agreement_clamps_at_zero() {
        let (s, fired) = cusum_step(CusumState::new(0.05, 2.0), true, 0.9);
        assert_eq!(s.s_plus, 0.0);
        assert!(!fired);
    }

    #[test]
    fn repeated_disagreement_fires_on_third_step() {
        // hand-stepped: 0.85, 1.70, 2.55 > 2.0
        let mut s = CusumState::new(0.05, 2.0);
        let mut fired_at = None;
        for step in 1..=5 {
            let (next, fired) = cusum_step(s, false, 0.9);
            s = next;
            if fired {
                fired_at = Some(step);
                break;
            }
        }
        assert_eq!(fired_at, Some((2.0f64 / 0.85).ceil() as i32));
        assert_eq!(s.s_plus, 0.0);
    }

    #[test]
    fn alternating_stream_never_fires() {
        let mut s = CusumState::new(0.05, 2.0);
        let mut max = 0.0f64;
        for i in 0..10_000 {
            let (next, fired) = cusum_step(s, i % 2 == 0, 0.5);
            assert!(!fired);
            s = next;
            max = max.max(s.s_plus);
        }
        // +0.45 then -0.55 from zero: bounded by a single increment
        assert!((max - 0.45).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn s_plus_never_negative(xs in prop::collection::vec(any::<bool>(), 0..300), p0 in 0.01f64..1.0, k in 0.0f64..0.5, h in 0.1f64..5.0) {
            let mut s = CusumState::new(k, h);
            for x in xs {
                let before = s.s_plus;
                let (next, fired) = cusum_step(s, x, p0);
                prop_assert!(next.s_plus >= 0.0);
                if fired {
                    prop_assert_eq!(next.s_plus, 0.0);
                    prop_assert!(before + p0 - (x as u8 as f64) - k > h);
                }
                s = next;
            }
        }
    }

    fn agreement(site: &str, tp: u64, fn_: u64, unverified: u64) -> StudyAgreement {
        StudyAgreement {
            study_uid: "S".into(),
            algorithm_id: "cad".into(),
            version: "1".into(),
            site_id: site.into(),
            ordinal: 0,
            tp,
            fp: 0,
            fn_,
            unverified,
            pairs: vec![],
            by_finding: BTreeMap::from([
                (FindingCode::Nodule, Counts { tp, fp: 0, fn_, unverified: 0 }),
                (FindingCode::Effusion, Counts { tp: 0, fp: 0, fn_: 0, unverified }),
            ]),
            false_positives: vec![],
            false_negatives: vec![],
        }
    }

    fn small_cfg() -> MonitorConfig {
        MonitorConfig { n0: 10, window: 20, ..Default::default() }
    }

    #[test]
    fn all_agree_stream_never_alerts() {
        let mut s = AgreementStream::new(StreamKey::new("A", "cad", "1"), small_cfg());
        for _ in 0..5_000 {
            assert!(observe_study(&mut s, &agreement("A", 1, 0, 0), t()).unwrap().is_empty());
        }
        assert_eq!(s.p0, Some(1.0));
    }

    #[test]
    fn key_mismatch() {
        let mut s = AgreementStream::new(StreamKey::new("A", "cad", "1"), small_cfg());
        assert!(matches!(observe_study(&mut s, &agreement("B", 1, 0, 0), t()), Err(MonitorError::KeyMismatch { .. })));
    }

    fn first_alert_after_collapse(critical_margin: f64) -> Alert {
        let cfg = MonitorConfig { h: 2.0, critical_margin, ..small_cfg() };
        let mut s = AgreementStream::new(StreamKey::new("A", "cad", "1"), cfg);
        for _ in 0..10 {
            observe_study(&mut s, &agreement("A", 1, 0, 0), t()).unwrap();
        }
        (0..20).flat_map(|_| observe_study(&mut s, &agreement("A", 0, 1, 0), t()).unwrap()).next().unwrap()
    }

    #[test]
    fn collapse_raises_alert_with_evidence() {
        let a = first_alert_after_collapse(0.2);
        assert_eq!(a.kind, AlertKind::InternalDrift);
        assert_eq!(a.evidence.threshold, 2.0);
        // p0 = 1, steps of 0.95: fires on the third miss at 2.85
        assert!((a.evidence.value - 2.85).abs() < 1e-12);
        assert_eq!(a.evidence.params["window_rate"], 10.0 / 13.0);
        assert_eq!(a.severity, Severity::Critical);
        assert_eq!(first_alert_after_collapse(0.3).severity, Severity::Warn);
    }

    proptest! {
        #[test]
        fn unverified_detections_do_not_move_the_stream(outcomes in prop::collection::vec((0u64..3, 0u64..3, 0u64..4), 1..80)) {
            let key = StreamKey::new("A", "cad", "1");
            let mut plain = AgreementStream::new(key.clone(), small_cfg());
            let mut noisy = AgreementStream::new(key, small_cfg());
            for (tp, fn_, extra) in outcomes {
                let a1 = observe_study(&mut plain, &agreement("A", tp, fn_, 0), t()).unwrap();
                let a2 = observe_study(&mut noisy, &agreement("A", tp, fn_, extra), t()).unwrap();
                prop_assert_eq!(a1, a2);
            }
            prop_assert_eq!(plain, noisy);
        }
    }

    #[test]
    fn replaying_a_stream_reproduces_alert_bytes() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut s = AgreementStream::new(StreamKey::new("A", "cad", "1"), MonitorConfig::default());
            let mut lines = Vec::new();
            for i in 0..4000 {
                let p = if i < 2000 { 0.9 } else { 0.5 };
                if let Some(a) = s.observe_event(rng.random_bool(p), t()) {
                    lines.push(to_canonical(&a).unwrap());
                }
            }
            lines
        };
        let first = run();
        assert!(!first.is_empty());
        assert_eq!(first, run());
    }

    /// Independent Pearson statistic without pooling.
    fn pearson(obs: &[f64], exp: &[f64]) -> f64 {
        obs.iter().zip(exp).map(|(o, e)| (o - e) * (o - e) / e).sum()
    }

    #[test]
    fn identical_distribution_statistic_zero() {
        let calib = [100, 100, 100, 100, 100, 100, 200];
        let window = [25, 25, 25, 25, 25, 25, 50];
        let t = chi_square_test(&window, &calib, 0.001).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.df, 6);
    }

    #[test]
    fn single_code_window_fires() {
        let calib = [100, 100, 100, 100, 100, 100, 0];
        let window = [200, 0, 0, 0, 0, 0, 0];
        let t = chi_square_test(&window, &calib, 0.001).unwrap();
        // expected 200/6 per code, the empty no-finding bin contributes nothing
        let e = 200.0 / 6.0;
        let oracle = pearson(&[200.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[e; 6]);
        assert!((t.statistic - oracle).abs() < 1e-9);
        assert_eq!(t.df, 5);
        assert!(t.statistic > t.threshold);
    }

    #[test]
    fn quantiles_match_tables() {
        // upper 0.001 points of chi-square, 6 and 7 degrees of freedom
        let q6 = ChiSquared::new(6.0).unwrap().inverse_cdf(0.999);
        let q7 = ChiSquared::new(7.0).unwrap().inverse_cdf(0.999);
        assert!((q6 - 22.458).abs() < 1e-3);
        assert!((q7 - 24.322).abs() < 1e-3);
    }

    #[test]
    fn sparse_bins_are_pooled() {
        let calib = [500, 500, 2, 1, 1, 0, 496];
        let window = [100, 100, 3, 0, 0, 0, 97];
        let t = chi_square_test(&window, &calib, 0.001).unwrap();
        // pooled bin (expected 1.2) joins the smallest remaining bin
        let e_small = 1500.0 * 4.0 / 1500.0 * 300.0 / 1500.0;
        assert!(e_small < 5.0);
        let exp = [100.0, 100.0, 99.2 + 0.8];
        let obs = [100.0, 100.0, 97.0 + 3.0];
        assert!((t.statistic - pearson(&obs, &exp)).abs() < 1e-9);
        assert_eq!(t.df, 2);
    }

    #[test]
    fn profile_tests_each_full_window() {
        let cfg = MonitorConfig { prevalence_n0: 50, prevalence_window: 20, ..Default::default() };
        let mut p = PrevalenceProfile::new(StreamKey::new("A", "cad", "1"), cfg);
        let nodule = BTreeSet::from([FindingCode::Nodule]);
        let none = BTreeSet::new();
        for i in 0..50 {
            assert!(p.observe(if i % 2 == 0 { &nodule } else { &none }, t()).is_none());
        }
        assert!(p.calibrated());
        let mut alerts = vec![];
        for _ in 0..40 {
            alerts.extend(p.observe(&BTreeSet::from([FindingCode::Fracture]), t()));
        }
        assert_eq!(p.windows, 2);
        assert_eq!(alerts.len(), 2);
        assert_eq!(alerts[0].kind, AlertKind::ExternalDrift);
        assert_ne!(alerts[0].alert_id, alerts[1].alert_id);
    }

    struct Dir(Result<BTreeSet<String>, DirectoryUnavailable>);

    impl DeploymentDirectory for Dir {
        fn list_sites_running(&self, _: &str, _: &str) -> Result<BTreeSet<String>, DirectoryUnavailable> {
            self.0.clone()
        }
    }

    fn sample_alert() -> Alert {
        let evidence = Evidence { statistic: "cusum_s_plus".into(), value: 10.2, threshold: 10.0, params: BTreeMap::new() };
        Alert {
            alert_id: "alert-1".into(),
            kind: AlertKind::InternalDrift,
            key: StreamKey::new("A", "cad", "1"),
            severity: Severity::Warn,
            evidence,
            raised_at: t(),
        }
    }

    #[test]
    fn propagation_reaches_every_running_site_once() {
        let dir = Dir(Ok(["A", "B", "C"].map(String::from).into()));
        let q = QueueNotifier::default();
        let mut p = Propagator::new();
        let sent = p.propagate(&sample_alert(), &dir, &q).unwrap();
        let recipients: Vec<_> = sent.iter().map(|n| n.recipient.clone()).collect();
        assert_eq!(
            recipients,
            vec![
                Recipient::Site("A".into()),
                Recipient::Site("B".into()),
                Recipient::Site("C".into()),
                Recipient::Developer("cad".into())
            ]
        );
        assert!(p.propagate(&sample_alert(), &dir, &q).unwrap().is_empty());
        assert_eq!(q.snapshot().len(), 4);
    }

    #[test]
    fn suspended_everywhere_reaches_developer_only() {
        let q = QueueNotifier::default();
        let sent = Propagator::new().propagate(&sample_alert(), &Dir(Ok(BTreeSet::new())), &q).unwrap();
        assert_eq!(sent.len(), 1);
        assert_eq!(sent[0].recipient, Recipient::Developer("cad".into()));
    }

    #[test]
    fn unavailable_directory_is_retriable() {
        let q = QueueNotifier::default();
        let mut p = Propagator::new();
        let down = Dir(Err(DirectoryUnavailable("down".into())));
        assert!(matches!(p.propagate(&sample_alert(), &down, &q), Err(PropagateError::Retriable(_))));
        let up = Dir(Ok(BTreeSet::new()));
        assert_eq!(p.propagate(&sample_alert(), &up, &q).unwrap().len(), 1);
    }

    #[test]
    fn http_notifier_posts_canonical_record() {
        use std::io::Read;
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/alerts", listener.local_addr().unwrap());
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = s.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(h) = text.find("\r\n\r\n") {
                    let len: usize = text[..h]
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length: ").map(|v| v.trim().parse().unwrap()))
                        .unwrap();
                    if buf.len() >= h + 4 + len {
                        s.write_all(b"HTTP/1.1 204 No Content\r\nContent-Length: 0\r\n\r\n").unwrap();
                        return String::from_utf8(buf[h + 4..h + 4 + len].to_vec()).unwrap();
                    }
                }
            }
        });
        let recipient = Recipient::Site("A".into());
        let http = HttpNotifier::new(BTreeMap::from([(recipient.clone(), url)]));
        let n = Notification { alert_id: "alert-1".into(), recipient, alert: sample_alert() };
        http.deliver(&n).unwrap();
        assert_eq!(server.join().unwrap(), to_canonical(&n).unwrap());
        let other = Notification { recipient: Recipient::Site("Z".into()), ..n };
        assert!(matches!(http.deliver(&other), Err(NotifyError::NoRoute(_))));
    }

    #[test]
    fn alert_log_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alerts.log");
        let log = AlertLog::new(&path);
        log.append(&sample_alert()).unwrap();
        log.append(&sample_alert()).unwrap();
        assert_eq!(AlertLog::read(&path).unwrap(), vec![sample_alert(), sample_alert()]);
    }

    #[test]
    fn failing_notifier_leaves_alert_retriable() {
        struct Broken(Cell<bool>);
        impl Notifier for Broken {
            fn deliver(&self, _: &Notification) -> Result<(), NotifyError> {
                if self.0.get() {
                    Err(NotifyError::Delivery("refused".into()))
                } else {
                    Ok(())
                }
            }
        }
        let dir = Dir(Ok(BTreeSet::from(["A".to_owned()])));
        let n = Broken(Cell::new(true));
        let mut p = Propagator::new();
        assert!(p.propagate(&sample_alert(), &dir, &n).is_err());
        n.0.set(false);
        assert_eq!(p.propagate(&sample_alert(), &dir, &n).unwrap().len(), 2);
    }
}
