//! Comparison of algorithm detections with report-derived labels:
//! greedy localized matching, per-study agreement, ledgers and the
//! discrepancy export that feeds retraining.

use crate::canonical::{canonical_digest, Digest};
use crate::model::{region_iou, FindingCode, Region, Violation};
use crate::report::{ExtractedLabel, Polarity, Strength};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeedbackError {
    #[error("label {index} belongs to study '{found}', expected '{expected}'")]
    CrossStudy { index: usize, expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Execution {
    Local,
    Central,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub finding: FindingCode,
    pub image_uid: String,
    pub region: Region,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmOutput {
    pub study_uid: String,
    pub algorithm_id: String,
    pub version: String,
    pub executed: Execution,
    pub detections: Vec<Detection>,
}

impl AlgorithmOutput {
    /// Unique per study, algorithm version and execution origin, so local
    /// and central runs of the same study never collide.
    pub fn primary_uid(&self) -> String {
        let origin = match self.executed {
            Execution::Local => "LOCAL",
            Execution::Central => "CENTRAL",
        };
        format!("{}:{}:{}:{}", self.study_uid, self.algorithm_id, self.version, origin)
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        for (i, d) in self.detections.iter().enumerate() {
            let p = format!("detections[{i}]");
            if !(0.0..=1.0).contains(&d.confidence) {
                v.push(Violation::new(format!("{p}.confidence"), "confidence in [0,1]"));
            }
            if !d.region.is_well_formed() {
                v.push(Violation::new(format!("{p}.region"), "degenerate box"));
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    /// Unpaired detections of a code that already has a matched pair count
    /// as unverified rather than false positive.
    pub demote_representative: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { iou_threshold: DEFAULT_IOU_THRESHOLD, demote_representative: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub detection: usize,
    pub label: usize,
    /// `None` for code-level matches against text-only labels; 1.0 for
    /// point containment.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub study_uid: String,
    pub pairs: Vec<Pair>,
}

/// Localized agreement score, if the pair is eligible.
pub fn localized_score(det: &Detection, label: &ExtractedLabel, threshold: f64) -> Option<f64> {
    if label.image_uid.as_deref() != Some(det.image_uid.as_str()) {
        return None;
    }
    let region = label.region.as_ref()?;
    match (det.region, *region) {
        (a @ Region::Rect { .. }, b @ Region::Rect { .. }) => {
            let iou = region_iou(&a, &b).ok()?;
            (iou >= threshold).then_some(iou)
        }
        (r @ Region::Rect { .. }, Region::Point { x0, y0 }) | (Region::Point { x0, y0 }, r @ Region::Rect { .. }) => {
            r.contains(x0, y0).then_some(1.0)
        }
        (a @ Region::Point { .. }, b @ Region::Point { .. }) => (a == b).then_some(1.0),
    }
}

/// Greedy one-to-one matching: localized candidates by descending score
/// (ties to lower detection, then lower label index), then text-only
/// positive labels against any unpaired detection of the same code.
pub fn match_detections(
    out: &AlgorithmOutput,
    labels: &[ExtractedLabel],
    cfg: &MatchConfig,
) -> Result<MatchResult, FeedbackError> {
    if let Some((index, l)) = labels.iter().enumerate().find(|(_, l)| l.study_uid != out.study_uid) {
        return Err(FeedbackError::CrossStudy {
            index,
            expected: out.study_uid.clone(),
            found: l.study_uid.clone(),
        });
    }
    let mut candidates = Vec::new();
    for (di, d) in out.detections.iter().enumerate() {
        for (li, l) in labels.iter().enumerate() {
            if l.finding != d.finding || l.polarity != Polarity::Positive || l.strength != Strength::Hyperlinked {
                continue;
            }
            if let Some(score) = localized_score(d, l, cfg.iou_threshold) {
                candidates.push((score, di, li));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut used_d = vec![false; out.detections.len()];
    let mut used_l = vec![false; labels.len()];
    let mut pairs = Vec::new();
    for (score, di, li) in candidates {
        if used_d[di] || used_l[li] {
            continue;
        }
        used_d[di] = true;
        used_l[li] = true;
        pairs.push(Pair { detection: di, label: li, iou: Some(score) });
    }
    for (li, l) in labels.iter().enumerate() {
        if l.polarity != Polarity::Positive || l.strength != Strength::TextOnly {
            continue;
        }
        if let Some(di) = (0..out.detections.len()).find(|&di| !used_d[di] && out.detections[di].finding == l.finding) {
            used_d[di] = true;
            used_l[li] = true;
            pairs.push(Pair { detection: di, label: li, iou: None });
        }
    }
    Ok(MatchResult { study_uid: out.study_uid.clone(), pairs })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub unverified: u64,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.unverified += o.unverified;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyAgreement {
    pub study_uid: String,
    pub algorithm_id: String,
    pub version: String,
    pub site_id: String,
    /// Position of the study in its site's stream.
    pub ordinal: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub unverified: u64,
    pub pairs: Vec<Pair>,
    pub by_finding: BTreeMap<FindingCode, Counts>,
    pub false_positives: Vec<Detection>,
    pub false_negatives: Vec<ExtractedLabel>,
}

impl StudyAgreement {
    pub fn counts(&self) -> Counts {
        Counts { tp: self.tp, fp: self.fp, fn_: self.fn_, unverified: self.unverified }
    }
}

pub fn score_study(
    m: &MatchResult,
    out: &AlgorithmOutput,
    labels: &[ExtractedLabel],
    site_id: &str,
    ordinal: u64,
    cfg: &MatchConfig,
) -> StudyAgreement {
    let mut by_finding: BTreeMap<FindingCode, Counts> = BTreeMap::new();
    let paired_d: BTreeSet<usize> = m.pairs.iter().map(|p| p.detection).collect();
    let paired_l: BTreeSet<usize> = m.pairs.iter().map(|p| p.label).collect();
    let mentioned: BTreeSet<FindingCode> = labels.iter().map(|l| l.finding).collect();
    let mut codes_with_pairs = BTreeSet::new();
    for p in &m.pairs {
        let code = out.detections[p.detection].finding;
        codes_with_pairs.insert(code);
        by_finding.entry(code).or_default().tp += 1;
    }
    let mut false_negatives = Vec::new();
    for (li, l) in labels.iter().enumerate() {
        if l.is_positive() && !paired_l.contains(&li) {
            by_finding.entry(l.finding).or_default().fn_ += 1;
            false_negatives.push(l.clone());
        }
    }
    let mut false_positives = Vec::new();
    for (di, d) in out.detections.iter().enumerate() {
        if paired_d.contains(&di) {
            continue;
        }
        let c = by_finding.entry(d.finding).or_default();
        let demoted = cfg.demote_representative && codes_with_pairs.contains(&d.finding);
        if mentioned.contains(&d.finding) && !demoted {
            c.fp += 1;
            false_positives.push(d.clone());
        } else {
            c.unverified += 1;
        }
    }
    let mut total = Counts::default();
    by_finding.values().for_each(|c| total.add(c));
    StudyAgreement {
        study_uid: out.study_uid.clone(),
        algorithm_id: out.algorithm_id.clone(),
        version: out.version.clone(),
        site_id: site_id.to_owned(),
        ordinal,
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        unverified: total.unverified,
        pairs: m.pairs.clone(),
        by_finding,
        false_positives,
        false_negatives,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupBy {
    pub site: bool,
    pub algorithm: bool,
    pub version: bool,
    /// Window width in study ordinals.
    pub window: Option<u64>,
}

impl GroupBy {
    pub fn stream() -> Self {
        Self { site: true, algorithm: true, version: true, window: None }
    }

    pub fn stream_windows(width: u64) -> Self {
        Self { window: Some(width), ..Self::stream() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LedgerKey {
    pub site_id: Option<String>,
    pub algorithm_id: Option<String>,
    pub version: Option<String>,
    pub window: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub studies: u64,
    pub counts: Counts,
}

impl LedgerRow {
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.counts.tp, self.counts.tp + self.counts.fn_)
    }

    pub fn ppv(&self) -> Option<f64> {
        ratio(self.counts.tp, self.counts.tp + self.counts.fp)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub type Ledger = BTreeMap<LedgerKey, LedgerRow>;

pub fn aggregate_metrics<'a>(agreements: impl IntoIterator<Item = &'a StudyAgreement>, group: GroupBy) -> Ledger {
    let mut ledger = Ledger::new();
    for a in agreements {
        let key = LedgerKey {
            site_id: group.site.then(|| a.site_id.clone()),
            algorithm_id: group.algorithm.then(|| a.algorithm_id.clone()),
            version: group.version.then(|| a.version.clone()),
            window: group.window.map(|w| a.ordinal / w.max(1)),
        };
        let row = ledger.entry(key).or_default();
        row.studies += 1;
        row.counts.add(&a.counts());
    }
    ledger
}

pub const LEDGER_HEADER: [&str; 11] =
    ["site_id", "algorithm_id", "version", "window", "studies", "tp", "fp", "fn", "unverified", "sensitivity", "ppv"];

pub fn format_ratio(r: Option<f64>) -> String {
    r.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn write_ledger_csv<W: io::Write>(ledger: &Ledger, w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(LEDGER_HEADER)?;
    for (k, r) in ledger {
        out.write_record([
            k.site_id.clone().unwrap_or_default(),
            k.algorithm_id.clone().unwrap_or_default(),
            k.version.clone().unwrap_or_default(),
            k.window.map(|w| w.to_string()).unwrap_or_default(),
            r.studies.to_string(),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.fn_.to_string(),
            r.counts.unverified.to_string(),
            format_ratio(r.sensitivity()),
            format_ratio(r.ppv()),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiscrepancyKind {
    FalsePositive,
    FalseNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Evidence {
    Detection(Detection),
    Label(ExtractedLabel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyItem {
    pub site_id: String,
    pub study_uid: String,
    pub algorithm_id: String,
    pub version: String,
    pub kind: DiscrepancyKind,
    pub finding: FindingCode,
    pub evidence: Evidence,
}

impl DiscrepancyItem {
    pub fn detail_digest(&self) -> Digest {
        canonical_digest(&self.evidence)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiscrepancyFilter {
    pub site_id: Option<String>,
    pub algorithm_id: Option<String>,
    pub version: Option<String>,
}

impl DiscrepancyFilter {
    fn accepts(&self, a: &StudyAgreement) -> bool {
        let ok = |f: &Option<String>, v: &str| f.as_deref().is_none_or(|f| f == v);
        ok(&self.site_id, &a.site_id) && ok(&self.algorithm_id, &a.algorithm_id) && ok(&self.version, &a.version)
    }
}

/// One item per false positive and false negative, ordered by
/// (site, study, finding) with input order kept among equals.
pub fn export_discrepancies<'a>(
    agreements: impl IntoIterator<Item = &'a StudyAgreement>,
    filter: &DiscrepancyFilter,
) -> Vec<DiscrepancyItem> {
    let mut items = Vec::new();
    for a in agreements.into_iter().filter(|a| filter.accepts(a)) {
        let item = |kind, finding, evidence| DiscrepancyItem {
            site_id: a.site_id.clone(),
            study_uid: a.study_uid.clone(),
            algorithm_id: a.algorithm_id.clone(),
            version: a.version.clone(),
            kind,
            finding,
            evidence,
        };
        for d in &a.false_positives {
            items.push(item(DiscrepancyKind::FalsePositive, d.finding, Evidence::Detection(d.clone())));
        }
        for l in &a.false_negatives {
            items.push(item(DiscrepancyKind::FalseNegative, l.finding, Evidence::Label(l.clone())));
        }
    }
    items.sort_by(|x, y| (&x.site_id, &x.study_uid, x.finding).cmp(&(&y.site_id, &y.study_uid, y.finding)));
    items
}

pub const DISCREPANCY_HEADER: [&str; 7] =
    ["site_id", "study_uid", "kind", "finding", "algorithm_id", "version", "detail_digest"];

pub fn write_discrepancies_csv<W: io::Write>(items: &[DiscrepancyItem], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(DISCREPANCY_HEADER)?;
    for i in items {
        let kind = match i.kind {
            DiscrepancyKind::FalsePositive => "FALSE_POSITIVE",
            DiscrepancyKind::FalseNegative => "FALSE_NEGATIVE",
        };
        out.write_record([
            i.site_id.as_str(),
            i.study_uid.as_str(),
            kind,
            i.finding.as_str(),
            i.algorithm_id.as_str(),
            i.version.as_str(),
            i.detail_digest().as_str(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
