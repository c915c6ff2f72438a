//! Deterministic multi-site scenario driver. Synthesizes studies, reports
//! and algorithm outputs, pushes them through de-identification, the wire
//! protocol, scoring and monitoring, and collects the resulting metrics.
//!
//! Every magnitude produced here is synthetic.

use crate::canonical::{canonical_digest, to_canonical, Digest};
use crate::clock::VirtualClock;
use crate::deid::{deidentify_study, verify_deidentified, DeidPolicy, SiteSecret};
use crate::feedback::{
    aggregate_metrics, export_discrepancies, format_ratio, match_detections, score_study, write_discrepancies_csv,
    write_ledger_csv, AlgorithmOutput, Detection, DiscrepancyFilter, DiscrepancyItem, Execution, GroupBy, Ledger,
    MatchConfig, StudyAgreement,
};
use crate::ingest::{
    decode_envelope, encode_envelope, submit_batch, Ack, AckStatus, Envelope, Hub, MemoryStore, Payload, RetryPolicy,
    Sleeper, Transport, TransportError,
};
use crate::model::{FindingCode, IdentityBlock, ImageRef, Measurement, MeasurementUnit, Modality, Region, StudyRecord};
use crate::monitor::{
    AgreementStream, Alert, AlertAck, AlertKind, MonitorConfig, Notification, PrevalenceProfile, Propagator,
    QueueNotifier, Recipient, StreamKey,
};
use crate::registry::{
    verify_audit_chain, AuditEntry, AuditHead, DeployMode, DeploymentAssignment, ModelRecord, ModelStatus, Registry,
};
use crate::report::{extract_labels, parse_report, ExtractedLabel, HyperlinkAnchor, LabelSet, Polarity, Strength};
use aho_corasick::AhoCorasickBuilder;
use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

/// Probability (or rate) per finding code. Reads either one number for all
/// codes or a map; codes missing from a map are 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PerCodeRepr", into = "BTreeMap<FindingCode, f64>")]
pub struct PerCode(BTreeMap<FindingCode, f64>);

#[derive(Deserialize)]
#[serde(untagged)]
enum PerCodeRepr {
    All(f64),
    Each(BTreeMap<FindingCode, f64>),
}

impl From<PerCodeRepr> for PerCode {
    fn from(r: PerCodeRepr) -> Self {
        match r {
            PerCodeRepr::All(v) => PerCode::all(v),
            PerCodeRepr::Each(m) => PerCode(FindingCode::ALL.iter().map(|c| (*c, m.get(c).copied().unwrap_or(0.0))).collect()),
        }
    }
}

impl From<PerCode> for BTreeMap<FindingCode, f64> {
    fn from(p: PerCode) -> Self {
        p.0
    }
}

impl PerCode {
    pub fn all(v: f64) -> Self {
        PerCode(FindingCode::ALL.iter().map(|c| (*c, v)).collect())
    }

    pub fn with(mut self, code: FindingCode, v: f64) -> Self {
        self.0.insert(code, v);
        self
    }

    pub fn get(&self, code: FindingCode) -> f64 {
        self.0.get(&code).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiologistProfile {
    pub sensitivity: PerCode,
    pub hyperlink_rate: f64,
    pub representative_only: f64,
    pub negation_mention_rate: f64,
    /// Probability an anchor marks a point instead of a box.
    #[serde(default)]
    pub pointer_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmProfile {
    pub sensitivity: PerCode,
    pub fp_per_study: f64,
    pub localization_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub site_id: String,
    /// Studies per hour, sets the virtual acquisition times.
    pub case_rate: f64,
    pub n_studies: u64,
    pub radiologist: RadiologistProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub algorithm_id: String,
    pub version: String,
    pub execution: DeployMode,
    pub profile: AlgorithmProfile,
    /// Sites the version is assigned to; all sites when absent.
    #[serde(default)]
    pub sites: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum DriftChange {
    SensitivityDrop { sensitivity: PerCode },
    PrevalenceShift { case_mix: PerCode },
    LocalizationDegrade { localization_sigma: f64 },
}

impl DriftChange {
    fn name(&self) -> &'static str {
        match self {
            DriftChange::SensitivityDrop { .. } => "SENSITIVITY_DROP",
            DriftChange::PrevalenceShift { .. } => "PREVALENCE_SHIFT",
            DriftChange::LocalizationDegrade { .. } => "LOCALIZATION_DEGRADE",
        }
    }

    fn alert_kind(&self) -> AlertKind {
        match self {
            DriftChange::PrevalenceShift { .. } => AlertKind::ExternalDrift,
            _ => AlertKind::InternalDrift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftEvent {
    pub at_study: u64,
    #[serde(flatten)]
    pub change: DriftChange,
    /// Restricts the event to one site; all sites when absent.
    #[serde(default)]
    pub site_id: Option<String>,
    /// Restricts algorithm-side changes to one algorithm.
    #[serde(default)]
    pub algorithm_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum Assertion {
    /// Every drift onset of this alert kind is detected within `within`
    /// agreement events (internal) or studies (external).
    AlertWithin { kind: AlertKind, within: u64 },
    MaxAlerts {
        #[serde(default)]
        kind: Option<AlertKind>,
        max: u64,
    },
    MaxFalseAlarms { max: u64 },
    /// Each internal-drift alert reached every site assigned the version
    /// and the developer channel, once each.
    NotifiedAllSites,
    AuditOk,
    NoPhiAtHub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub sites: Vec<SiteConfig>,
    pub algorithms: Vec<AlgorithmConfig>,
    pub case_mix: PerCode,
    #[serde(default)]
    pub drift_events: Vec<DriftEvent>,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub matching: MatchConfig,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("{path}: {message}")]
    Field { path: String, message: String },
}

fn field_err(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { path: path.into(), message: message.into() }
}

fn check_prob(path: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(field_err(path, format!("probability {v} outside [0,1]")))
    }
}

fn check_per_code(path: &str, p: &PerCode) -> Result<(), ConfigError> {
    for (c, v) in &p.0 {
        check_prob(&format!("{path}.{c}"), *v)?;
    }
    Ok(())
}

fn check_nonneg(path: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field_err(path, format!("{v} must be a finite value >= 0")))
    }
}

fn check_ident(path: &str, s: &str) -> Result<(), ConfigError> {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) {
        Ok(())
    } else {
        Err(field_err(path, format!("'{s}' must be nonempty [A-Za-z0-9._-]")))
    }
}

impl ScenarioConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        to_canonical(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sites.is_empty() {
            return Err(field_err("sites", "at least one site"));
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.sites.iter().enumerate() {
            let p = format!("sites[{i}]");
            check_ident(&format!("{p}.site_id"), &s.site_id)?;
            if !seen.insert(&s.site_id) {
                return Err(field_err(format!("{p}.site_id"), "duplicate site_id"));
            }
            if !(s.case_rate > 0.0 && s.case_rate.is_finite()) {
                return Err(field_err(format!("{p}.case_rate"), "must be > 0"));
            }
            if s.n_studies == 0 {
                return Err(field_err(format!("{p}.n_studies"), "must be >= 1"));
            }
            let r = &s.radiologist;
            check_per_code(&format!("{p}.radiologist.sensitivity"), &r.sensitivity)?;
            check_prob(&format!("{p}.radiologist.hyperlink_rate"), r.hyperlink_rate)?;
            check_prob(&format!("{p}.radiologist.representative_only"), r.representative_only)?;
            check_prob(&format!("{p}.radiologist.negation_mention_rate"), r.negation_mention_rate)?;
            check_prob(&format!("{p}.radiologist.pointer_rate"), r.pointer_rate)?;
        }
        let mut versions = BTreeSet::new();
        for (i, a) in self.algorithms.iter().enumerate() {
            let p = format!("algorithms[{i}]");
            check_ident(&format!("{p}.algorithm_id"), &a.algorithm_id)?;
            check_ident(&format!("{p}.version"), &a.version)?;
            if !versions.insert((&a.algorithm_id, &a.version)) {
                return Err(field_err(p, "duplicate (algorithm_id, version)"));
            }
            check_per_code(&format!("{p}.profile.sensitivity"), &a.profile.sensitivity)?;
            check_nonneg(&format!("{p}.profile.fp_per_study"), a.profile.fp_per_study)?;
            check_nonneg(&format!("{p}.profile.localization_sigma"), a.profile.localization_sigma)?;
            for (j, s) in a.sites.iter().flatten().enumerate() {
                if !seen.contains(s) {
                    return Err(field_err(format!("{p}.sites[{j}]"), format!("unknown site '{s}'")));
                }
            }
        }
        check_per_code("case_mix", &self.case_mix)?;
        let longest = self.sites.iter().map(|s| s.n_studies).max().unwrap_or(0);
        for (i, d) in self.drift_events.iter().enumerate() {
            let p = format!("drift_events[{i}]");
            if d.at_study >= longest {
                return Err(field_err(format!("{p}.at_study"), format!("beyond scenario length {longest}")));
            }
            if let Some(s) = &d.site_id {
                if !seen.contains(s) {
                    return Err(field_err(format!("{p}.site_id"), format!("unknown site '{s}'")));
                }
            }
            match &d.change {
                DriftChange::SensitivityDrop { sensitivity } => check_per_code(&format!("{p}.params.sensitivity"), sensitivity)?,
                DriftChange::PrevalenceShift { case_mix } => check_per_code(&format!("{p}.params.case_mix"), case_mix)?,
                DriftChange::LocalizationDegrade { localization_sigma } => {
                    check_nonneg(&format!("{p}.params.localization_sigma"), *localization_sigma)?
                }
            }
        }
        let m = &self.monitor;
        check_nonneg("monitor.k", m.k)?;
        check_nonneg("monitor.h", m.h)?;
        if m.n0 == 0 || m.window == 0 || m.prevalence_n0 == 0 || m.prevalence_window == 0 {
            return Err(field_err("monitor", "n0, window, prevalence_n0 and prevalence_window must be >= 1"));
        }
        if !(m.alpha > 0.0 && m.alpha < 1.0) {
            return Err(field_err("monitor.alpha", "must be in (0,1)"));
        }
        check_prob("matching.iou_threshold", self.matching.iou_threshold)?;
        Ok(())
    }
}

/// Independent RNG stream per purpose, derived from the scenario seed.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(Sha256::digest(format!("{seed}/{label}")).into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub finding: FindingCode,
    pub image_uid: String,
    pub frame: u32,
    pub region: Region,
    pub measurement: Measurement,
}

/// Fixed facts about a site used by the case generator.
#[derive(Debug, Clone)]
pub struct SiteContext {
    pub site_id: String,
    pub site_index: usize,
    pub patient_pool: u64,
}

impl SiteContext {
    pub fn new(site_id: &str, site_index: usize, n_studies: u64) -> Self {
        SiteContext { site_id: site_id.into(), site_index, patient_pool: (n_studies / 3).max(1) }
    }
}

const FIRST_NAMES: [&str; 20] = [
    "Alice", "Bruno", "Carmen", "Dmitri", "Elena", "Farid", "Grace", "Hiro", "Ingrid", "Jamal", "Keiko", "Luis",
    "Maya", "Nikos", "Olga", "Priya", "Quentin", "Rosa", "Sven", "Tariq",
];
const LAST_NAMES: [&str; 20] = [
    "Abbott", "Brennan", "Castillo", "Duarte", "Eriksen", "Fontaine", "Gallo", "Haddad", "Iwasaki", "Jensen",
    "Kowalski", "Laurent", "Moreau", "Nakamura", "Okafor", "Petrov", "Quinn", "Rahman", "Silva", "Tanaka",
];
const INDICATIONS: [&str; 6] = ["chest pain", "trauma", "cough", "headache", "shortness of breath", "routine screening"];

/// Synthetic identity of patient `p` at a site; stable across studies.
pub fn synthetic_patient(site: &SiteContext, p: u64) -> IdentityBlock {
    let h = Sha256::digest(format!("patient/{}/{p}", site.site_id));
    let pick = u64::from_be_bytes(h[..8].try_into().unwrap());
    let name = format!("{} {}", FIRST_NAMES[(pick % 20) as usize], LAST_NAMES[((pick / 20) % 20) as usize]);
    let born = NaiveDate::from_ymd_opt(1930, 1, 1).unwrap() + Duration::days(((pick >> 16) % 25_000) as i64);
    let patient_id = format!("MRN-{}{p:05}", site.site_index);
    IdentityBlock {
        patient_name: name.clone(),
        patient_id: patient_id.clone(),
        birth_date: born,
        accession_number: String::new(),
        phi_tokens: vec![name, patient_id],
    }
}

fn image_uid(site: &SiteContext, index: u64, k: usize) -> String {
    format!("IMG-{}", &hex::encode(Sha256::digest(format!("image/{}/{index}/{k}", site.site_id)))[..12])
}

/// Samples one study and its ground-truth lesions.
pub fn generate_case(
    rng: &mut impl Rng,
    case_mix: &PerCode,
    site: &SiteContext,
    index: u64,
    acquired_at: DateTime<Utc>,
) -> (StudyRecord, Vec<Lesion>) {
    let patient = rng.random_range(0..site.patient_pool);
    let modality = [Modality::CR, Modality::CT, Modality::MR, Modality::US][rng.random_range(0..4)];
    let n_images = rng.random_range(1..=3);
    let images: Vec<ImageRef> = (0..n_images)
        .map(|k| {
            let side = [256u32, 512, 1024][rng.random_range(0..3)];
            let frame_count = if modality == Modality::CR { 1 } else { rng.random_range(1..=60) };
            ImageRef { image_uid: image_uid(site, index, k), width: side, height: side, frame_count }
        })
        .collect();
    let mut identity = synthetic_patient(site, patient);
    identity.accession_number = format!("ACC-{}-{index:06}", site.site_index);
    identity.phi_tokens.push(identity.accession_number.clone());
    let indication = INDICATIONS[rng.random_range(0..INDICATIONS.len())];
    let order_text = match rng.random_range(0..3) {
        0 => format!("{indication}, evaluate for {}", identity.patient_name),
        1 => format!("{} ({}) {indication}", identity.patient_name, identity.patient_id),
        _ => format!("{indication}; accession {}", identity.accession_number),
    };

    let mut truth = Vec::new();
    for code in FindingCode::ALL {
        if !rng.random_bool(case_mix.get(code)) {
            continue;
        }
        for _ in 0..rng.random_range(1..=3) {
            let img = &images[rng.random_range(0..images.len())];
            let frame = rng.random_range(1..=img.frame_count);
            let w = rng.random_range(8..=64u32);
            let h = rng.random_range(8..=64u32);
            let x0 = rng.random_range(0..=img.width - w);
            let y0 = rng.random_range(0..=img.height - h);
            let measurement = Measurement::new(w as f64 * 0.5, MeasurementUnit::Mm).expect("positive width");
            truth.push(Lesion {
                finding: code,
                image_uid: img.image_uid.clone(),
                frame,
                region: Region::rect(x0, y0, x0 + w, y0 + h),
                measurement,
            });
        }
    }
    let study = StudyRecord {
        study_uid: format!("{}-ST{index:06}", site.site_id),
        site_id: site.site_id.clone(),
        identity,
        images,
        modality,
        acquired_at,
        order_text,
    };
    (study, truth)
}

// Template bank. Filler text must contain no lexicon phrase and no negation
// cue, and no sentence terminator before the final period.
const INTRO: [&str; 4] = [
    "Comparison is made with the prior examination.",
    "Technique is standard for this protocol.",
    "Image quality is adequate.",
    "Clinical history reviewed.",
];
const CLOSING: [&str; 3] =
    ["Clinical correlation is recommended.", "Follow-up as clinically indicated.", "Report reviewed and signed."];
const PHI_FILLER: [&str; 2] = ["Findings discussed with {name}.", "Patient {pid} identity confirmed."];
const POSITIVE: [&str; 5] = [
    "{P} {A} is seen.",
    "Findings include {p} {A}.",
    "{A} demonstrates {p}.",
    "Interval {p} {A} noted.",
    "There is {p} {A} on this study.",
];
const NEGATIVE: [&str; 5] =
    ["No {p} is identified.", "There is no {p}.", "Negative for {p}.", "Images show no {p}.", "Study obtained without {p}."];
const NEGATIVE_PAIR: [&str; 3] = ["No {p} or {q}.", "Negative for {p} and {q}.", "There is no {p} and no {q}."];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

fn fill_positive(template: &str, phrase: &str, anchors: &[String]) -> String {
    let t = if anchors.is_empty() {
        if template.starts_with("{A}") {
            template.replacen("{A}", "Imaging", 1)
        } else {
            template.replacen(" {A}", "", 1)
        }
    } else {
        template.replacen("{A}", &anchors.join(" and "), 1)
    };
    t.replace("{P}", &capitalize(phrase)).replace("{p}", phrase)
}

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn phrase_for(rng: &mut impl Rng, code: FindingCode) -> &'static str {
    let phrases: Vec<&'static str> = code.phrases().collect();
    *pick(rng, &phrases)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub body: String,
    /// The labels a correct parser must recover from `body`.
    pub intents: Vec<ExtractedLabel>,
}

/// Writes a report for `truth` as the radiologist profile would, recording
/// the label each sentence is meant to produce.
pub fn render_report(
    truth: &[Lesion],
    study: &StudyRecord,
    report_uid: &str,
    profile: &RadiologistProfile,
    rng: &mut impl Rng,
) -> RenderedReport {
    let mut sentences: Vec<String> = Vec::new();
    let mut intents = Vec::new();
    let intent = |finding, polarity, sentence_index, anchor: Option<(&Lesion, Region)>| ExtractedLabel {
        report_uid: report_uid.to_owned(),
        study_uid: study.study_uid.clone(),
        finding,
        polarity,
        strength: if anchor.is_some() { Strength::Hyperlinked } else { Strength::TextOnly },
        region: anchor.map(|a| a.1),
        image_uid: anchor.map(|a| a.0.image_uid.clone()),
        measurement: anchor.map(|a| a.0.measurement),
        sentence_index,
    };

    if rng.random_bool(0.5) {
        sentences.push(pick(rng, &INTRO).to_string());
    }
    for code in FindingCode::ALL {
        let lesions: Vec<&Lesion> = truth.iter().filter(|l| l.finding == code).collect();
        let detected: Vec<&Lesion> =
            lesions.into_iter().filter(|_| rng.random_bool(profile.sensitivity.get(code))).collect();
        if detected.is_empty() {
            continue;
        }
        let representative = detected.len() > 1 && rng.random_bool(profile.representative_only);
        let anchored: Vec<Option<(&Lesion, Region)>> = detected
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let linked = rng.random_bool(profile.hyperlink_rate) && (!representative || j == 0);
                let point = rng.random_bool(profile.pointer_rate);
                linked.then(|| {
                    let region = match l.region {
                        Region::Rect { x0, y0, x1, y1 } if point => Region::point((x0 + x1) / 2, (y0 + y1) / 2),
                        r => r,
                    };
                    (*l, region)
                })
            })
            .collect();
        let render = |a: &(&Lesion, Region)| HyperlinkAnchor::render(&a.0.image_uid, a.0.frame, &a.1, Some(&a.0.measurement));
        let per_lesion = detected.len() > 1 && rng.random_bool(0.3);
        if per_lesion {
            for a in &anchored {
                let tokens: Vec<String> = a.iter().map(render).collect();
                let phrase = phrase_for(rng, code);
                sentences.push(fill_positive(pick(rng, &POSITIVE), phrase, &tokens));
                intents.push(intent(code, Polarity::Positive, sentences.len() - 1, *a));
            }
        } else {
            let links: Vec<(&Lesion, Region)> = anchored.iter().flatten().copied().collect();
            let tokens: Vec<String> = links.iter().map(render).collect();
            let phrase = phrase_for(rng, code);
            sentences.push(fill_positive(pick(rng, &POSITIVE), phrase, &tokens));
            let at = sentences.len() - 1;
            if links.is_empty() {
                intents.push(intent(code, Polarity::Positive, at, None));
            }
            for l in links {
                intents.push(intent(code, Polarity::Positive, at, Some(l)));
            }
        }
    }
    if rng.random_bool(0.2) {
        let t = pick(rng, &PHI_FILLER);
        sentences.push(t.replace("{name}", &study.identity.patient_name).replace("{pid}", &study.identity.patient_id));
    }
    let present: BTreeSet<FindingCode> = truth.iter().map(|l| l.finding).collect();
    let negated: Vec<FindingCode> = FindingCode::ALL
        .into_iter()
        .filter(|c| !present.contains(c))
        .filter(|_| rng.random_bool(profile.negation_mention_rate))
        .collect();
    let mut i = 0;
    while i < negated.len() {
        let at = sentences.len();
        if i + 1 < negated.len() && rng.random_bool(0.3) {
            let (p, q) = (phrase_for(rng, negated[i]), phrase_for(rng, negated[i + 1]));
            sentences.push(capitalize(&pick(rng, &NEGATIVE_PAIR).replace("{p}", p).replace("{q}", q)));
            intents.push(intent(negated[i], Polarity::Negative, at, None));
            intents.push(intent(negated[i + 1], Polarity::Negative, at, None));
            i += 2;
        } else {
            let p = phrase_for(rng, negated[i]);
            sentences.push(capitalize(&pick(rng, &NEGATIVE).replace("{p}", p)));
            intents.push(intent(negated[i], Polarity::Negative, at, None));
            i += 1;
        }
    }
    if rng.random_bool(0.5) || sentences.is_empty() {
        sentences.push(pick(rng, &CLOSING).to_string());
    }
    RenderedReport { body: sentences.join(" "), intents }
}

fn jitter(v: u32, noise: f64, lo: u32, hi: u32) -> u32 {
    (v as f64 + noise.round()).clamp(lo as f64, hi as f64) as u32
}

/// Runs the parametric algorithm model on one study.
///
/// Draw order per true lesion: detection coin, then four jitter draws
/// (x0, y0, x1, y1) when sigma > 0, then confidence. False positives follow.
pub fn simulate_algorithm(
    truth: &[Lesion],
    study: &StudyRecord,
    profile: &AlgorithmProfile,
    rng: &mut impl Rng,
    algorithm_id: &str,
    version: &str,
    executed: Execution,
) -> AlgorithmOutput {
    let normal = (profile.localization_sigma > 0.0).then(|| Normal::new(0.0, profile.localization_sigma).unwrap());
    let mut detections = Vec::new();
    for l in truth {
        if !rng.random_bool(profile.sensitivity.get(l.finding)) {
            continue;
        }
        let img = study.image(&l.image_uid).expect("lesion image belongs to study");
        let region = match (l.region, &normal) {
            (Region::Rect { x0, y0, x1, y1 }, Some(n)) => {
                let mut j = [0.0; 4];
                j.iter_mut().for_each(|v| *v = n.sample(rng));
                let nx0 = jitter(x0, j[0], 0, img.width - 1);
                let ny0 = jitter(y0, j[1], 0, img.height - 1);
                let nx1 = jitter(x1, j[2], 1, img.width).max(nx0 + 1);
                let ny1 = jitter(y1, j[3], 1, img.height).max(ny0 + 1);
                Region::rect(nx0, ny0, nx1, ny1)
            }
            (r, _) => r,
        };
        let confidence = 1.0 - rng.random::<f64>();
        detections.push(Detection { finding: l.finding, image_uid: l.image_uid.clone(), region, confidence });
    }
    let n_fp = if profile.fp_per_study > 0.0 {
        Poisson::new(profile.fp_per_study).unwrap().sample(rng) as u64
    } else {
        0
    };
    for _ in 0..n_fp {
        let finding = FindingCode::ALL[rng.random_range(0..FindingCode::ALL.len())];
        let img = &study.images[rng.random_range(0..study.images.len())];
        let w = rng.random_range(8..=64u32);
        let h = rng.random_range(8..=64u32);
        let x0 = rng.random_range(0..=img.width - w);
        let y0 = rng.random_range(0..=img.height - h);
        let confidence = 1.0 - rng.random::<f64>();
        detections.push(Detection {
            finding,
            image_uid: img.image_uid.clone(),
            region: Region::rect(x0, y0, x0 + w, y0 + h),
            confidence,
        });
    }
    AlgorithmOutput {
        study_uid: study.study_uid.clone(),
        algorithm_id: algorithm_id.into(),
        version: version.into(),
        executed,
        detections,
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("site {site_id} study {study_index}, stage {stage}: {message}")]
pub struct SimError {
    pub site_id: String,
    pub study_index: u64,
    pub stage: &'static str,
    pub message: String,
}

/// Client side of the wire: every envelope is framed and decoded before
/// it reaches the hub.
struct WireTransport(Arc<Hub>);

impl Transport for WireTransport {
    fn send(&self, e: &Envelope) -> Result<Ack, TransportError> {
        let decoded = decode_envelope(&encode_envelope(e)).map_err(|err| TransportError::Fatal(err.to_string()))?;
        self.0.ingest(&decoded).map_err(|err| TransportError::Transient(err.to_string()))
    }
}

/// Retries happen in virtual time.
struct NoSleep;

impl Sleeper for NoSleep {
    fn sleep(&self, _: std::time::Duration) {}
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayRow {
    pub site_id: String,
    pub algorithm_id: String,
    pub version: String,
    pub drift_kind: String,
    pub at_study: u64,
    /// "events" for agreement-stream drift, "studies" for prevalence drift.
    pub unit: String,
    pub onset: u64,
    pub detected_at: Option<u64>,
}

impl DelayRow {
    pub fn delay(&self) -> Option<u64> {
        self.detected_at.map(|d| d - self.onset)
    }

    fn alert_kind(&self) -> AlertKind {
        if self.unit == "studies" {
            AlertKind::ExternalDrift
        } else {
            AlertKind::InternalDrift
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
struct IngestSummary<'a> {
    site_id: &'a str,
    first_study: u64,
    last_study: u64,
    accepted: u64,
    duplicate: u64,
}

/// Everything a scenario run produces. [`MetricsBundle::files`] renders it
/// to the on-disk bundle.
#[derive(Debug, Clone)]
pub struct MetricsBundle {
    pub seed: u64,
    pub scenario_digest: Digest,
    pub secret_source: &'static str,
    pub studies: u64,
    pub agreements: Vec<StudyAgreement>,
    /// The scored output behind each agreement, same order.
    pub outputs: Vec<AlgorithmOutput>,
    /// Extracted labels per de-identified study uid.
    pub label_sets: BTreeMap<String, LabelSet>,
    pub ledger: Ledger,
    pub window_ledger: Ledger,
    pub alerts: Vec<Alert>,
    /// Position in its stream (agreement events or studies) of each alert.
    pub alert_positions: Vec<u64>,
    pub notifications: Vec<Notification>,
    pub delays: Vec<DelayRow>,
    pub false_alarms: u64,
    pub discrepancies: Vec<DiscrepancyItem>,
    pub models: Vec<ModelRecord>,
    pub assignments: Vec<DeploymentAssignment>,
    pub audit: Vec<AuditEntry>,
    pub audit_head: AuditHead,
    pub audit_ok: Result<(), u64>,
    pub hub_records: u64,
    pub phi_leaks: u64,
    pub dual_executions: u64,
    pub assertions: Vec<AssertionResult>,
}

impl MetricsBundle {
    pub fn assertions_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    /// File name → bytes. Identical runs give identical maps.
    pub fn files(&self) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut buf = Vec::new();
        write_ledger_csv(&self.ledger, &mut buf).expect("in-memory write");
        out.insert("ledger.csv".into(), std::mem::take(&mut buf));
        write_ledger_csv(&self.window_ledger, &mut buf).expect("in-memory write");
        out.insert("ledger_windows.csv".into(), std::mem::take(&mut buf));
        write_discrepancies_csv(&self.discrepancies, &mut buf).expect("in-memory write");
        out.insert("discrepancies.csv".into(), std::mem::take(&mut buf));

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "alert_id", "kind", "site_id", "algorithm_id", "version", "severity", "statistic", "value", "threshold",
            "position", "raised_at",
        ])
        .unwrap();
        for (a, pos) in self.alerts.iter().zip(&self.alert_positions) {
            let kind = serde_json::to_value(a.kind).unwrap();
            let severity = serde_json::to_value(a.severity).unwrap();
            w.write_record([
                a.alert_id.as_str(),
                kind.as_str().unwrap(),
                &a.key.site_id,
                &a.key.algorithm_id,
                &a.key.version,
                severity.as_str().unwrap(),
                &a.evidence.statistic,
                &format!("{:.6}", a.evidence.value),
                &format!("{:.6}", a.evidence.threshold),
                &pos.to_string(),
                &a.raised_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            ])
            .unwrap();
        }
        out.insert("alerts.csv".into(), w.into_inner().unwrap());
        let log: String = self.alerts.iter().map(|a| to_canonical(a).unwrap() + "\n").collect();
        out.insert("alerts.log".into(), log.into_bytes());

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["alert_id", "channel", "recipient"]).unwrap();
        for n in &self.notifications {
            let (channel, id) = match &n.recipient {
                Recipient::Site(s) => ("SITE", s),
                Recipient::Developer(d) => ("DEVELOPER", d),
            };
            w.write_record([n.alert_id.as_str(), channel, id]).unwrap();
        }
        out.insert("notifications.csv".into(), w.into_inner().unwrap());

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "site_id", "algorithm_id", "version", "drift_kind", "at_study", "unit", "onset", "detected_at", "delay",
        ])
        .unwrap();
        let opt = |v: Option<u64>| v.map(|v| v.to_string()).unwrap_or_default();
        for d in &self.delays {
            w.write_record([
                d.site_id.as_str(),
                &d.algorithm_id,
                &d.version,
                &d.drift_kind,
                &d.at_study.to_string(),
                &d.unit,
                &d.onset.to_string(),
                &opt(d.detected_at),
                &opt(d.delay()),
            ])
            .unwrap();
        }
        out.insert("delays.csv".into(), w.into_inner().unwrap());

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["name", "passed", "detail"]).unwrap();
        for a in &self.assertions {
            w.write_record([a.name.as_str(), if a.passed { "true" } else { "false" }, &a.detail]).unwrap();
        }
        out.insert("assertions.csv".into(), w.into_inner().unwrap());

        let verdict = match self.audit_ok {
            Ok(()) => format!("OK {}\n", self.audit.len()),
            Err(seq) => format!("BROKEN {seq}\n"),
        };
        out.insert("audit.verdict".into(), verdict.into_bytes());
        let lines = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>().into_bytes();
        out.insert("registry/models.log".into(), lines(self.models.iter().map(|m| to_canonical(m).unwrap()).collect()));
        out.insert(
            "registry/assignments.log".into(),
            lines(self.assignments.iter().map(|a| to_canonical(a).unwrap()).collect()),
        );
        out.insert("registry/audit.log".into(), lines(self.audit.iter().map(|e| to_canonical(e).unwrap()).collect()));
        out.insert("registry/audit.head".into(), lines(vec![to_canonical(&self.audit_head).unwrap()]));

        let metadata = serde_json::json!({
            "synthetic": true,
            "note": "all studies, reports, volumes and prevalences are synthetic",
            "seed": self.seed,
            "scenario_digest": self.scenario_digest,
            "secret_source": self.secret_source,
            "studies": self.studies,
            "alerts": self.alerts.len(),
            "false_alarms": self.false_alarms,
            "notifications": self.notifications.len(),
            "hub_records": self.hub_records,
            "phi_leaks": self.phi_leaks,
            "dual_executions": self.dual_executions,
            "audit_entries": self.audit.len(),
            "assertions_passed": self.assertions_passed(),
        });
        out.insert("metadata.json".into(), (to_canonical(&metadata).unwrap() + "\n").into_bytes());
        out
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        for (name, bytes) in self.files() {
            let path = dir.join(&name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, bytes)?;
        }
        Ok(())
    }
}

struct AlgState {
    cfg: AlgorithmConfig,
    profile: AlgorithmProfile,
    mode: DeployMode,
    rng: ChaCha8Rng,
}

struct SiteState {
    cfg: SiteConfig,
    ctx: SiteContext,
    case_mix: PerCode,
    case_rng: ChaCha8Rng,
    report_rng: ChaCha8Rng,
    algs: Vec<AlgState>,
    secret: SiteSecret,
    accepted: u64,
    duplicate: u64,
    summarized_from: u64,
}

/// One study after the site-side half of the loop.
struct SiteStudy {
    phi_tokens: Vec<String>,
    labels: LabelSet,
    envelopes: Vec<Envelope>,
    scored: Vec<AlgorithmOutput>,
    performed_at: DateTime<Utc>,
}

type StageError = (&'static str, String);

impl SiteState {
    fn new(cfg: &ScenarioConfig, idx: usize, secret: Option<&SiteSecret>) -> Self {
        let s = &cfg.sites[idx];
        let algs = cfg
            .algorithms
            .iter()
            .filter(|a| a.sites.as_ref().is_none_or(|l| l.contains(&s.site_id)))
            .map(|a| AlgState {
                cfg: a.clone(),
                profile: a.profile.clone(),
                mode: a.execution,
                rng: stream_rng(cfg.seed, &format!("alg/{}/{}/{}", s.site_id, a.algorithm_id, a.version)),
            })
            .collect();
        SiteState {
            cfg: s.clone(),
            ctx: SiteContext::new(&s.site_id, idx, s.n_studies),
            case_mix: cfg.case_mix.clone(),
            case_rng: stream_rng(cfg.seed, &format!("case/{}", s.site_id)),
            report_rng: stream_rng(cfg.seed, &format!("report/{}", s.site_id)),
            algs,
            secret: secret.cloned().unwrap_or_else(|| derived_secret(cfg.seed, &s.site_id)),
            accepted: 0,
            duplicate: 0,
            summarized_from: 0,
        }
    }

    /// Generate, report, parse, de-identify, extract, run the algorithms
    /// and seal everything that leaves the site.
    fn produce(&mut self, i: u64, t: DateTime<Utc>) -> Result<SiteStudy, StageError> {
        let (study, truth) = generate_case(&mut self.case_rng, &self.case_mix, &self.ctx, i, t);
        let report_uid = format!("RPT-{}-{i:06}", self.ctx.site_index);
        let rendered = render_report(&truth, &study, &report_uid, &self.cfg.radiologist, &mut self.report_rng);
        let authored_at = t + Duration::minutes(30);
        let raw = format!(
            "{report_uid}\t{}\trad-{}\t{}\n{}",
            study.study_uid,
            self.ctx.site_index,
            authored_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            rendered.body
        );
        let report = parse_report(&raw, &study).map_err(|e| ("parse", e.to_string()))?;
        let policy = DeidPolicy::standard(self.secret.clone());
        let performed_at = authored_at + Duration::minutes(1);
        let deid = deidentify_study(&study, std::slice::from_ref(&report), &policy, performed_at)
            .map_err(|e| ("deidentify", e.to_string()))?;
        verify_deidentified(&deid.study, &deid.reports, &study.identity.phi_tokens)
            .map_err(|leaks| ("deidentify", format!("{} leaks", leaks.len())))?;
        let dstudy = &deid.study;
        let dreport = &deid.reports[0];
        let labels = extract_labels(dreport);

        let mut outbox =
            vec![Payload::Study(dstudy.clone()), Payload::Report(dreport.clone()), Payload::LabelSet(labels.clone())];
        let mut scored = Vec::new();
        for alg in &mut self.algs {
            let origins: &[Execution] = match alg.mode {
                DeployMode::Local => &[Execution::Local],
                DeployMode::Central => &[Execution::Central],
                DeployMode::Both => &[Execution::Local, Execution::Central],
            };
            let out = simulate_algorithm(
                &truth,
                dstudy,
                &alg.profile,
                &mut alg.rng,
                &alg.cfg.algorithm_id,
                &alg.cfg.version,
                *origins.last().unwrap(),
            );
            for o in origins {
                outbox.push(Payload::AlgOutput(AlgorithmOutput { executed: *o, ..out.clone() }));
            }
            scored.push(out);
        }
        let envelopes = outbox
            .iter()
            .map(|p| Envelope::seal(&self.cfg.site_id, p, performed_at))
            .collect::<Result<_, _>>()
            .map_err(|e| ("seal", e.to_string()))?;
        Ok(SiteStudy { phi_tokens: study.identity.phi_tokens, labels, envelopes, scored, performed_at })
    }
}

fn start_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

fn study_time(site: &SiteConfig, i: u64) -> DateTime<Utc> {
    start_time() + Duration::milliseconds((i as f64 * 3600.0 / site.case_rate * 1000.0) as i64)
}

const SUMMARY_EVERY: u64 = 500;

/// Derived per-site secret for runs without a configured one.
fn derived_secret(seed: u64, site_id: &str) -> SiteSecret {
    SiteSecret::new(Sha256::digest(format!("sim-site-secret/{seed}/{site_id}")).to_vec()).expect("nonempty")
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<MetricsBundle, SimError> {
    run_scenario_with(cfg, None)
}

/// Runs the whole loop. With `secret` every site de-identifies with it;
/// otherwise each site gets a secret derived from the seed.
pub fn run_scenario_with(cfg: &ScenarioConfig, secret: Option<&SiteSecret>) -> Result<MetricsBundle, SimError> {
    let fail = |site: &str, i: u64, stage: &'static str, message: String| SimError {
        site_id: site.into(),
        study_index: i,
        stage,
        message,
    };
    cfg.validate().map_err(|e| fail("", 0, "config", e.to_string()))?;
    let start = start_time();
    let clock = VirtualClock::starting_at(start);
    let mut registry = Registry::in_memory(Arc::new(clock.clone()));
    let reg_err = |e: crate::registry::RegistryError| fail("", 0, "registry", e.to_string());
    for a in &cfg.algorithms {
        let rec = ModelRecord {
            algorithm_id: a.algorithm_id.clone(),
            version: a.version.clone(),
            weights_digest: Digest::of_bytes(format!("weights/{}/{}", a.algorithm_id, a.version).as_bytes()),
            status: ModelStatus::Candidate,
            registered_at: start,
        };
        registry.register_version(rec, "developer").map_err(reg_err)?;
        registry.set_status(&a.algorithm_id, &a.version, ModelStatus::Approved, "regulatory").map_err(reg_err)?;
        registry.set_status(&a.algorithm_id, &a.version, ModelStatus::Deployed, "ops").map_err(reg_err)?;
        for s in &cfg.sites {
            if a.sites.as_ref().is_some_and(|l| !l.contains(&s.site_id)) {
                continue;
            }
            let assignment = DeploymentAssignment {
                site_id: s.site_id.clone(),
                algorithm_id: a.algorithm_id.clone(),
                version: a.version.clone(),
                mode: a.execution,
                active: true,
            };
            registry.assign_deployment(assignment, "ops").map_err(reg_err)?;
        }
    }

    let mut sites: Vec<SiteState> =
        cfg.sites.iter().enumerate().map(|(idx, _)| SiteState::new(cfg, idx, secret)).collect();

    // discrete events in acquisition-time order
    let mut schedule: Vec<(DateTime<Utc>, usize, u64)> = Vec::new();
    for (si, s) in cfg.sites.iter().enumerate() {
        schedule.extend((0..s.n_studies).map(|i| (study_time(s, i), si, i)));
    }
    schedule.sort();

    let hub = Arc::new(Hub::new(Arc::new(MemoryStore::new())));
    let transport = WireTransport(hub.clone());
    let retry = RetryPolicy::default();
    let notifier = QueueNotifier::default();
    let mut propagator = Propagator::new();
    let mut streams: BTreeMap<StreamKey, AgreementStream> = BTreeMap::new();
    let mut profiles: BTreeMap<StreamKey, PrevalenceProfile> = BTreeMap::new();
    let mut agreements = Vec::new();
    let mut outputs = Vec::new();
    let mut label_sets = BTreeMap::new();
    let mut alerts: Vec<Alert> = Vec::new();
    let mut alert_positions = Vec::new();
    let mut notifications = Vec::new();
    let mut delays: Vec<DelayRow> = Vec::new();
    let mut false_alarms = 0u64;
    let mut phi: BTreeSet<String> = BTreeSet::new();

    for (t, si, i) in schedule {
        if clock_now(&clock) < t {
            clock.set(t);
        }
        let site_id = sites[si].cfg.site_id.clone();
        let f = |stage: &'static str, m: String| fail(&site_id, i, stage, m);

        for d in cfg.drift_events.iter().filter(|d| d.at_study == i) {
            if d.site_id.as_ref().is_some_and(|s| *s != site_id) {
                continue;
            }
            let site = &mut sites[si];
            if let DriftChange::PrevalenceShift { case_mix } = &d.change {
                site.case_mix = case_mix.clone();
            }
            for alg in &mut site.algs {
                let targeted = d.algorithm_id.as_ref().is_none_or(|a| *a == alg.cfg.algorithm_id);
                let key = StreamKey::new(&site_id, &alg.cfg.algorithm_id, &alg.cfg.version);
                let (unit, onset) = match &d.change {
                    DriftChange::PrevalenceShift { .. } => ("studies", i),
                    _ if !targeted => continue,
                    DriftChange::SensitivityDrop { sensitivity } => {
                        alg.profile.sensitivity = sensitivity.clone();
                        ("events", streams.get(&key).map_or(0, |s| s.events))
                    }
                    DriftChange::LocalizationDegrade { localization_sigma } => {
                        alg.profile.localization_sigma = *localization_sigma;
                        ("events", streams.get(&key).map_or(0, |s| s.events))
                    }
                };
                debug_assert_eq!(unit == "studies", d.change.alert_kind() == AlertKind::ExternalDrift);
                delays.push(DelayRow {
                    site_id: site_id.clone(),
                    algorithm_id: alg.cfg.algorithm_id.clone(),
                    version: alg.cfg.version.clone(),
                    drift_kind: d.change.name().into(),
                    at_study: i,
                    unit: unit.into(),
                    onset,
                    detected_at: None,
                });
            }
        }

        let site = &mut sites[si];
        let SiteStudy { phi_tokens, labels, envelopes, scored, performed_at } =
            site.produce(i, t).map_err(|(stage, m)| f(stage, m))?;
        phi.extend(phi_tokens);
        clock.set(performed_at);
        let acks = submit_batch(&transport, &envelopes, &retry, &NoSleep).map_err(|e| f("submit", e.to_string()))?;
        for a in &acks {
            match a.status {
                AckStatus::Accepted => site.accepted += 1,
                AckStatus::Duplicate => site.duplicate += 1,
                AckStatus::Rejected => return Err(f("submit", format!("{} rejected: {:?}", a.envelope_id, a.reason))),
            }
        }

        let positives: BTreeSet<FindingCode> = labels.labels.iter().filter(|l| l.is_positive()).map(|l| l.finding).collect();
        let mut fired = Vec::new();
        for out in &scored {
            let m = match_detections(out, &labels.labels, &cfg.matching).map_err(|e| f("score", e.to_string()))?;
            let a = score_study(&m, out, &labels.labels, &site_id, i, &cfg.matching);
            let n_pos = labels.labels.iter().filter(|l| l.is_positive()).count() as u64;
            if a.tp + a.fp + a.unverified != out.detections.len() as u64 || a.tp + a.fn_ != n_pos {
                return Err(f("score", "conservation identity violated".into()));
            }
            let key = StreamKey::of(&a);
            let stream = streams.entry(key.clone()).or_insert_with(|| AgreementStream::new(key.clone(), cfg.monitor));
            for alert in crate::monitor::observe_study(stream, &a, performed_at).map_err(|e| f("monitor", e.to_string()))? {
                let pos = alert.evidence.params["event"] as u64;
                fired.push((alert, pos));
            }
            let profile =
                profiles.entry(key.clone()).or_insert_with(|| PrevalenceProfile::new(key.clone(), cfg.monitor));
            if let Some(alert) = profile.observe(&positives, performed_at) {
                fired.push((alert, i));
            }
            agreements.push(a);
        }
        outputs.extend(scored);
        label_sets.insert(labels.study_uid.clone(), labels);

        for (alert, pos) in fired {
            let kind = alert.kind;
            let rows: Vec<&mut DelayRow> = delays
                .iter_mut()
                .filter(|d| {
                    d.alert_kind() == kind
                        && d.onset <= pos
                        && (d.site_id.as_str(), d.algorithm_id.as_str(), d.version.as_str())
                            == (alert.key.site_id.as_str(), alert.key.algorithm_id.as_str(), alert.key.version.as_str())
                })
                .collect();
            if rows.is_empty() {
                false_alarms += 1;
            }
            for d in rows {
                d.detected_at.get_or_insert(pos);
            }
            registry.record_alert(&alert, "monitor").map_err(|e| f("audit", e.to_string()))?;
            let sent = propagator.propagate(&alert, &registry, &notifier).map_err(|e| f("propagate", e.to_string()))?;
            for n in &sent {
                if let Recipient::Site(s) = &n.recipient {
                    let ack = AlertAck {
                        alert_id: n.alert_id.clone(),
                        site_id: s.clone(),
                        acknowledged_by: format!("ops-{s}"),
                        acknowledged_at: performed_at,
                    };
                    let e = Envelope::seal(s, &Payload::AlertAck(ack), performed_at).map_err(|e| f("seal", e.to_string()))?;
                    let acks = submit_batch(&transport, &[e], &retry, &NoSleep).map_err(|e| f("submit", e.to_string()))?;
                    if acks[0].status == AckStatus::Rejected {
                        return Err(f("submit", format!("alert ack rejected: {:?}", acks[0].reason)));
                    }
                }
            }
            notifications.extend(sent);
            alerts.push(alert);
            alert_positions.push(pos);
        }

        let site = &mut sites[si];
        let last = i + 1 == site.cfg.n_studies;
        if (i + 1) % SUMMARY_EVERY == 0 || last {
            let summary = IngestSummary {
                site_id: &site_id,
                first_study: site.summarized_from,
                last_study: i,
                accepted: site.accepted,
                duplicate: site.duplicate,
            };
            registry.ingest_summary(&summary, "hub").map_err(|e| f("audit", e.to_string()))?;
            site.summarized_from = i + 1;
            site.accepted = 0;
            site.duplicate = 0;
        }
    }

    let stored = hub.store().envelopes().map_err(|e| fail("", 0, "hub", e.to_string()))?;
    let tokens: Vec<&String> = phi.iter().collect();
    let phi_leaks = if tokens.is_empty() {
        0
    } else {
        let ac = AhoCorasickBuilder::new().ascii_case_insensitive(true).build(&tokens).expect("phi automaton");
        stored.iter().filter(|e| ac.is_match(&e.payload)).count() as u64
    };
    let audit_ok = verify_audit_chain(registry.audit(), Some(&registry.head())).map_err(|b| b.seq);
    let studies = cfg.sites.iter().map(|s| s.n_studies).sum();
    let mut bundle = MetricsBundle {
        seed: cfg.seed,
        scenario_digest: canonical_digest(cfg),
        secret_source: if secret.is_some() { "environment" } else { "derived" },
        studies,
        ledger: aggregate_metrics(&agreements, GroupBy::stream()),
        window_ledger: aggregate_metrics(&agreements, GroupBy::stream_windows(cfg.monitor.prevalence_window)),
        discrepancies: export_discrepancies(&agreements, &DiscrepancyFilter::default()),
        agreements,
        outputs,
        label_sets,
        alerts,
        alert_positions,
        notifications,
        delays,
        false_alarms,
        models: registry.models().cloned().collect(),
        assignments: registry.assignments().cloned().collect(),
        audit: registry.audit().to_vec(),
        audit_head: registry.head(),
        audit_ok,
        hub_records: stored.len() as u64,
        phi_leaks,
        dual_executions: hub.dual_executions().len() as u64,
        assertions: Vec::new(),
    };
    bundle.assertions = cfg.assertions.iter().map(|a| evaluate(a, &bundle, &registry)).collect();
    Ok(bundle)
}

/// Order-independent totals of a [`run_stress`] run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StressReport {
    pub studies: u64,
    /// Distinct envelopes produced by all sites.
    pub envelopes: u64,
    pub accepted: u64,
    pub duplicate: u64,
    pub label_sets: Vec<LabelSet>,
    pub outputs: Vec<AlgorithmOutput>,
}

/// Runs every site on its own thread against a live hub behind `transport`.
/// Each study's envelopes are submitted twice, so every second pass must
/// come back DUPLICATE. No drift, monitoring or registry: only facts that
/// hold whatever the interleaving are collected.
pub fn run_stress(
    cfg: &ScenarioConfig,
    secret: Option<&SiteSecret>,
    transport: &(dyn Transport + Sync),
    sleeper: &(dyn Sleeper + Sync),
) -> Result<StressReport, SimError> {
    cfg.validate().map_err(|e| SimError { site_id: String::new(), study_index: 0, stage: "config", message: e.to_string() })?;
    let retry = RetryPolicy::default();
    let per_site: Vec<Result<StressReport, SimError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.sites.len())
            .map(|idx| {
                let retry = &retry;
                scope.spawn(move || {
                    let mut site = SiteState::new(cfg, idx, secret);
                    let site_id = site.cfg.site_id.clone();
                    let mut report = StressReport::default();
                    for i in 0..site.cfg.n_studies {
                        let f = |stage: &'static str, message: String| SimError {
                            site_id: site_id.clone(),
                            study_index: i,
                            stage,
                            message,
                        };
                        let study = site.produce(i, study_time(&site.cfg, i)).map_err(|(stage, m)| f(stage, m))?;
                        for pass in 0..2 {
                            let acks = submit_batch(transport, &study.envelopes, retry, sleeper)
                                .map_err(|e| f("submit", e.to_string()))?;
                            for a in acks {
                                match (pass, a.status) {
                                    (0, AckStatus::Accepted) => report.accepted += 1,
                                    (_, AckStatus::Duplicate) => report.duplicate += 1,
                                    (_, status) => {
                                        return Err(f("submit", format!("pass {pass}: {status:?} {:?}", a.reason)));
                                    }
                                }
                            }
                        }
                        report.studies += 1;
                        report.envelopes += study.envelopes.len() as u64;
                        report.label_sets.push(study.labels);
                        report.outputs.extend(study.scored);
                    }
                    Ok(report)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("site thread panicked")).collect()
    });
    let mut total = StressReport::default();
    for r in per_site {
        let r = r?;
        total.studies += r.studies;
        total.envelopes += r.envelopes;
        total.accepted += r.accepted;
        total.duplicate += r.duplicate;
        total.label_sets.extend(r.label_sets);
        total.outputs.extend(r.outputs);
    }
    Ok(total)
}

fn clock_now(clock: &VirtualClock) -> DateTime<Utc> {
    crate::clock::Clock::now(clock)
}

fn evaluate(a: &Assertion, b: &MetricsBundle, registry: &Registry) -> AssertionResult {
    let (name, passed, detail) = match a {
        Assertion::AlertWithin { kind, within } => {
            let rows: Vec<&DelayRow> = b.delays.iter().filter(|d| d.alert_kind() == *kind).collect();
            let missed: Vec<String> = rows
                .iter()
                .filter(|d| d.delay().is_none_or(|x| x > *within))
                .map(|d| format!("{}/{}/{}", d.site_id, d.algorithm_id, d.version))
                .collect();
            let detail = if rows.is_empty() {
                "no drift onsets of this kind".to_owned()
            } else if missed.is_empty() {
                format!("{} onsets detected", rows.len())
            } else {
                format!("not detected within {within}: {}", missed.join(" "))
            };
            (format!("ALERT_WITHIN {kind:?} {within}"), !rows.is_empty() && missed.is_empty(), detail)
        }
        Assertion::MaxAlerts { kind, max } => {
            let n = b.alerts.iter().filter(|x| kind.is_none_or(|k| x.kind == k)).count() as u64;
            (format!("MAX_ALERTS {max}"), n <= *max, format!("{n} alerts"))
        }
        Assertion::MaxFalseAlarms { max } => {
            (format!("MAX_FALSE_ALARMS {max}"), b.false_alarms <= *max, format!("{} false alarms", b.false_alarms))
        }
        Assertion::NotifiedAllSites => {
            let mut bad = Vec::new();
            let internal: Vec<&Alert> = b.alerts.iter().filter(|x| x.kind == AlertKind::InternalDrift).collect();
            for alert in &internal {
                let mut expected: Vec<Recipient> = registry
                    .list_sites_running(&alert.key.algorithm_id, &alert.key.version)
                    .into_iter()
                    .map(Recipient::Site)
                    .collect();
                expected.push(Recipient::Developer(alert.key.algorithm_id.clone()));
                expected.sort();
                let mut got: Vec<Recipient> =
                    b.notifications.iter().filter(|n| n.alert_id == alert.alert_id).map(|n| n.recipient.clone()).collect();
                got.sort();
                if got != expected {
                    bad.push(alert.alert_id.clone());
                }
            }
            let detail = format!("{} internal alerts, {} misrouted", internal.len(), bad.len());
            ("NOTIFIED_ALL_SITES".to_owned(), !internal.is_empty() && bad.is_empty(), detail)
        }
        Assertion::AuditOk => {
            let detail = match b.audit_ok {
                Ok(()) => format!("{} entries", b.audit.len()),
                Err(seq) => format!("broken at seq {seq}"),
            };
            ("AUDIT_OK".to_owned(), b.audit_ok.is_ok(), detail)
        }
        Assertion::NoPhiAtHub => {
            ("NO_PHI_AT_HUB".to_owned(), b.phi_leaks == 0, format!("{} records with PHI", b.phi_leaks))
        }
    };
    AssertionResult { name, passed, detail }
}

/// Per-stream summary rows for the `report` command: ledger counts, alert
/// counts and mean detection delay.
pub fn summary_rows(ledger_csv: &str, alerts_csv: &str, delays_csv: &str) -> Result<String, csv::Error> {
    type Key = (String, String, String);
    let mut alerts: BTreeMap<Key, u64> = BTreeMap::new();
    for r in csv::Reader::from_reader(alerts_csv.as_bytes()).records() {
        let r = r?;
        *alerts.entry((r[2].to_owned(), r[3].to_owned(), r[4].to_owned())).or_default() += 1;
    }
    let mut delays: BTreeMap<Key, Vec<u64>> = BTreeMap::new();
    for r in csv::Reader::from_reader(delays_csv.as_bytes()).records() {
        let r = r?;
        if let Ok(d) = r[8].parse::<u64>() {
            delays.entry((r[0].to_owned(), r[1].to_owned(), r[2].to_owned())).or_default().push(d);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["site_id", "algorithm_id", "version", "studies", "sensitivity", "ppv", "alerts", "mean_delay"])?;
    for r in csv::Reader::from_reader(ledger_csv.as_bytes()).records() {
        let r = r?;
        let key = (r[0].to_owned(), r[1].to_owned(), r[2].to_owned());
        let mean = delays.get(&key).map(|d| d.iter().sum::<u64>() as f64 / d.len() as f64);
        w.write_record([
            &r[0],
            &r[1],
            &r[2],
            &r[4],
            &r[9],
            &r[10],
            &alerts.get(&key).copied().unwrap_or(0).to_string(),
            &format_ratio(mean),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    let mut s = String::from_utf8(bytes).expect("csv of utf-8 input");
    if !s.ends_with('\n') {
        let _ = writeln!(s);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::region_iou;
    use crate::report::build_report;

    fn site() -> SiteContext {
        SiteContext::new("site-a", 0, 300)
    }

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
    }

    fn radiologist() -> RadiologistProfile {
        RadiologistProfile {
            sensitivity: PerCode::all(0.9),
            hyperlink_rate: 0.6,
            representative_only: 0.5,
            negation_mention_rate: 0.5,
            pointer_rate: 0.2,
        }
    }

    fn sorted(labels: &[ExtractedLabel]) -> Vec<String> {
        let mut v: Vec<String> = labels.iter().map(|l| to_canonical(l).unwrap()).collect();
        v.sort();
        v
    }

    #[test]
    fn zero_mix_gives_empty_truth() {
        let mut rng = stream_rng(1, "x");
        for i in 0..50 {
            let (s, truth) = generate_case(&mut rng, &PerCode::all(0.0), &site(), i, t0());
            assert!(truth.is_empty());
            assert!(crate::model::validate_study(&s).is_ok());
        }
    }

    #[test]
    fn same_seed_same_case() {
        let mix = PerCode::all(0.4);
        let a = generate_case(&mut stream_rng(9, "x"), &mix, &site(), 3, t0());
        let b = generate_case(&mut stream_rng(9, "x"), &mix, &site(), 3, t0());
        assert_eq!(a, b);
    }

    #[test]
    fn patients_repeat_with_stable_identity() {
        let mut rng = stream_rng(2, "x");
        let mut by_id: BTreeMap<String, (String, NaiveDate)> = BTreeMap::new();
        for i in 0..300 {
            let (s, _) = generate_case(&mut rng, &PerCode::all(0.1), &site(), i, t0());
            let id = &s.identity;
            let prev = by_id.insert(id.patient_id.clone(), (id.patient_name.clone(), id.birth_date));
            if let Some(p) = prev {
                assert_eq!(p, (id.patient_name.clone(), id.birth_date));
            }
        }
        assert!(by_id.len() < 300);
    }

    #[test]
    fn empirical_prevalence_matches_mix() {
        let mix = PerCode::all(0.0).with(FindingCode::Nodule, 0.3);
        let mut rng = stream_rng(4, "x");
        let n = 10_000;
        let hits = (0..n)
            .filter(|i| generate_case(&mut rng, &mix, &site(), *i, t0()).1.iter().any(|l| l.finding == FindingCode::Nodule))
            .count();
        let p = hits as f64 / n as f64;
        assert!((p - 0.3).abs() <= 0.015, "prevalence {p}");
    }

    #[test]
    fn filler_text_yields_no_labels() {
        let study = crate::model::fixtures::study();
        let fillers: Vec<String> = INTRO
            .iter()
            .chain(&CLOSING)
            .map(|s| s.to_string())
            .chain(PHI_FILLER.iter().map(|s| s.replace("{name}", "Priya Okafor").replace("{pid}", "MRN-000012")))
            .chain(INDICATIONS.iter().map(|s| format!("{s}.")))
            .chain(FIRST_NAMES.iter().chain(&LAST_NAMES).map(|s| format!("{s}.")))
            .collect();
        let r = build_report("R", &study, "dr", t0(), fillers.join(" ")).unwrap();
        assert!(extract_labels(&r).labels.is_empty());
    }

    #[test]
    fn single_aneurysm_fully_linked() {
        let mix = PerCode::all(0.0).with(FindingCode::Aneurysm, 1.0);
        let mut rng = stream_rng(5, "x");
        let profile = RadiologistProfile {
            sensitivity: PerCode::all(1.0),
            hyperlink_rate: 1.0,
            representative_only: 0.0,
            negation_mention_rate: 0.0,
            pointer_rate: 0.0,
        };
        let mut checked = 0;
        for i in 0..200 {
            let (study, truth) = generate_case(&mut rng, &mix, &site(), i, t0());
            if truth.len() != 1 {
                continue;
            }
            let r = render_report(&truth, &study, "R", &profile, &mut rng);
            let parsed = build_report("R", &study, "dr", t0(), r.body).unwrap();
            assert_eq!(parsed.anchors.len(), 1);
            assert_eq!(parsed.anchors[0].region, truth[0].region);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn blind_radiologist_writes_only_negations() {
        let profile = RadiologistProfile {
            sensitivity: PerCode::all(0.0),
            hyperlink_rate: 1.0,
            representative_only: 0.0,
            negation_mention_rate: 1.0,
            pointer_rate: 0.0,
        };
        let mut rng = stream_rng(6, "x");
        let (study, truth) = generate_case(&mut rng, &PerCode::all(0.0).with(FindingCode::Fracture, 1.0), &site(), 0, t0());
        let r = render_report(&truth, &study, "R", &profile, &mut rng);
        let parsed = build_report("R", &study, "dr", t0(), r.body.clone()).unwrap();
        assert!(parsed.anchors.is_empty());
        let labels = extract_labels(&parsed).labels;
        assert_eq!(labels.len(), 5);
        assert!(labels.iter().all(|l| l.polarity == Polarity::Negative && l.finding != FindingCode::Fracture));
    }

    #[test]
    fn parser_recovers_intents() {
        let mut rng = stream_rng(7, "x");
        let mix = PerCode::all(0.25);
        for i in 0..300 {
            let (study, truth) = generate_case(&mut rng, &mix, &site(), i, t0());
            let r = render_report(&truth, &study, "R", &radiologist(), &mut rng);
            let parsed = build_report("R", &study, "dr", t0(), r.body.clone()).unwrap();
            let got = extract_labels(&parsed);
            assert!(got.diagnostics.is_empty(), "{}", r.body);
            assert_eq!(sorted(&got.labels), sorted(&r.intents), "{}", r.body);
        }
    }

    fn algo(sens: f64, fp: f64, sigma: f64) -> AlgorithmProfile {
        AlgorithmProfile { sensitivity: PerCode::all(sens), fp_per_study: fp, localization_sigma: sigma }
    }

    #[test]
    fn noise_free_algorithm_reproduces_truth() {
        let mut rng = stream_rng(8, "x");
        for i in 0..50 {
            let (study, truth) = generate_case(&mut rng, &PerCode::all(0.3), &site(), i, t0());
            let out = simulate_algorithm(&truth, &study, &algo(1.0, 0.0, 0.0), &mut rng, "a", "1", Execution::Central);
            let regions: Vec<_> = out.detections.iter().map(|d| (d.finding, d.image_uid.clone(), d.region)).collect();
            let expected: Vec<_> = truth.iter().map(|l| (l.finding, l.image_uid.clone(), l.region)).collect();
            assert_eq!(regions, expected);
            assert!(out.detections.iter().all(|d| d.confidence > 0.0 && d.confidence <= 1.0));
        }
    }

    #[test]
    fn blind_algorithm_is_silent() {
        let mut rng = stream_rng(8, "x");
        let (study, truth) = generate_case(&mut rng, &PerCode::all(1.0), &site(), 0, t0());
        let out = simulate_algorithm(&truth, &study, &algo(0.0, 0.0, 0.0), &mut rng, "a", "1", Execution::Local);
        assert!(out.detections.is_empty());
    }

    /// Replays the documented draw order with its own box arithmetic and
    /// compares mean IoU with the truth.
    #[test]
    fn jitter_matches_replay_oracle() {
        let mut cases = stream_rng(10, "cases");
        let mut lesions = Vec::new();
        let mut i = 0;
        while lesions.len() < 1000 {
            let (study, truth) = generate_case(&mut cases, &PerCode::all(0.3), &site(), i, t0());
            lesions.extend(truth.into_iter().map(|l| (study.clone(), l)));
            i += 1;
        }
        lesions.truncate(1000);
        let sigma = 5.0;
        let mut rng = stream_rng(10, "alg");
        let mut replay = stream_rng(10, "alg");
        let normal = Normal::new(0.0, sigma).unwrap();
        let (mut sum_impl, mut sum_oracle) = (0.0, 0.0);
        for (study, l) in &lesions {
            let out = simulate_algorithm(std::slice::from_ref(l), study, &algo(1.0, 0.0, sigma), &mut rng, "a", "1", Execution::Central);
            sum_impl += region_iou(&out.detections[0].region, &l.region).unwrap();

            let _detect: bool = replay.random_bool(1.0);
            let img = study.image(&l.image_uid).unwrap();
            let Region::Rect { x0, y0, x1, y1 } = l.region else { unreachable!() };
            let mut c = [x0 as i64, y0 as i64, x1 as i64, y1 as i64];
            for v in c.iter_mut() {
                *v += normal.sample(&mut replay).round() as i64;
            }
            let (w, h) = (img.width as i64, img.height as i64);
            let a0 = c[0].clamp(0, w - 1);
            let b0 = c[1].clamp(0, h - 1);
            let a1 = c[2].clamp(1, w).max(a0 + 1);
            let b1 = c[3].clamp(1, h).max(b0 + 1);
            let _conf: f64 = replay.random();
            let inter = ((a1.min(x1 as i64) - a0.max(x0 as i64)).max(0) * (b1.min(y1 as i64) - b0.max(y0 as i64)).max(0)) as f64;
            let union = ((a1 - a0) * (b1 - b0) + (x1 - x0) as i64 * (y1 - y0) as i64) as f64 - inter;
            sum_oracle += inter / union;
        }
        let (m_impl, m_oracle) = (sum_impl / 1000.0, sum_oracle / 1000.0);
        assert!((m_impl - m_oracle).abs() <= 0.05, "{m_impl} vs {m_oracle}");
        assert!(m_impl < 0.95 && m_impl > 0.3);
    }

    pub(crate) fn small_scenario(n: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed: 11,
            sites: vec![SiteConfig { site_id: "site-a".into(), case_rate: 4.0, n_studies: n, radiologist: radiologist() }],
            algorithms: vec![AlgorithmConfig {
                algorithm_id: "cad".into(),
                version: "1.0".into(),
                execution: DeployMode::Central,
                profile: algo(0.9, 0.2, 2.0),
                sites: None,
            }],
            case_mix: PerCode::all(0.15),
            drift_events: vec![],
            monitor: MonitorConfig::default(),
            matching: MatchConfig::default(),
            assertions: vec![Assertion::MaxAlerts { kind: None, max: 0 }, Assertion::AuditOk, Assertion::NoPhiAtHub],
        }
    }

    #[test]
    fn in_control_smoke() {
        let b = run_scenario(&small_scenario(100)).unwrap();
        assert!(b.alerts.is_empty());
        assert!(!b.ledger.is_empty());
        assert_eq!(b.audit_ok, Ok(()));
        assert_eq!(b.phi_leaks, 0);
        assert!(b.assertions_passed(), "{:?}", b.assertions);
        assert_eq!(run_scenario(&small_scenario(100)).unwrap().files(), b.files());
    }

    #[test]
    fn ledger_conserves_agreement_counts() {
        let b = run_scenario(&small_scenario(120)).unwrap();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for a in &b.agreements {
            tp += a.by_finding.values().map(|c| c.tp).sum::<u64>();
            fp += a.by_finding.values().map(|c| c.fp).sum::<u64>();
            fn_ += a.by_finding.values().map(|c| c.fn_).sum::<u64>();
        }
        let row = b.ledger.values().next().unwrap();
        assert_eq!((row.counts.tp, row.counts.fp, row.counts.fn_), (tp, fp, fn_));
        assert_eq!(row.studies, 120);
    }

    #[test]
    fn dual_execution_is_flagged() {
        let mut cfg = small_scenario(20);
        cfg.algorithms[0].execution = DeployMode::Both;
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(b.dual_executions, 20);
    }

    #[test]
    fn negative_probability_names_field() {
        let mut cfg = small_scenario(10);
        cfg.sites[0].radiologist.hyperlink_rate = -0.1;
        let err = ScenarioConfig::from_text(&cfg.to_text()).unwrap_err();
        assert!(matches!(&err, ConfigError::Field { path, .. } if path == "sites[0].radiologist.hyperlink_rate"), "{err}");
    }

    #[test]
    fn config_text_round_trip_and_syntax_errors() {
        let cfg = small_scenario(10);
        assert_eq!(ScenarioConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let err = ScenarioConfig::from_text("{\n  \"seed\": 1,\n  \"bogus\": 2\n}").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 3, .. }), "{err}");
        let scalar = r#"{"seed":1,"sites":[{"site_id":"s","case_rate":1,"n_studies":5,"radiologist":{"sensitivity":0.9,"hyperlink_rate":1,"representative_only":0,"negation_mention_rate":0}}],"algorithms":[],"case_mix":{"NODULE":0.2},"drift_events":[{"at_study":2,"kind":"LOCALIZATION_DEGRADE","params":{"localization_sigma":4}}]}"#;
        let parsed = ScenarioConfig::from_text(scalar).unwrap();
        assert_eq!(parsed.case_mix.get(FindingCode::Nodule), 0.2);
        assert_eq!(parsed.case_mix.get(FindingCode::Fracture), 0.0);
        assert_eq!(parsed.sites[0].radiologist.sensitivity.get(FindingCode::Aneurysm), 0.9);
    }
}
