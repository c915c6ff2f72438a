//! Shared domain records: studies, image references, regions, the finding
//! vocabulary and measurements, plus structural validation.

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("region kind mismatch: expected BOX, got {0}")]
    KindMismatch(&'static str),
    #[error("invalid measurement '{0}'")]
    Measurement(String),
    #[error("unknown finding code '{0}'")]
    UnknownFinding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    CR,
    CT,
    MR,
    US,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityBlock {
    pub patient_name: String,
    pub patient_id: String,
    pub birth_date: NaiveDate,
    pub accession_number: String,
    /// Every identifying string known to appear in free text.
    pub phi_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_uid: String,
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_uid: String,
    pub site_id: String,
    pub identity: IdentityBlock,
    pub images: Vec<ImageRef>,
    pub modality: Modality,
    pub acquired_at: DateTime<Utc>,
    pub order_text: String,
}

impl StudyRecord {
    pub fn image(&self, image_uid: &str) -> Option<&ImageRef> {
        self.images.iter().find(|i| i.image_uid == image_uid)
    }
}

/// Image-space region in integer pixels. Boxes are half-open,
/// `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Region {
    #[serde(rename = "POINT")]
    Point { x0: u32, y0: u32 },
    #[serde(rename = "BOX")]
    Rect { x0: u32, y0: u32, x1: u32, y1: u32 },
}

impl Region {
    pub fn rect(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Region::Rect { x0, y0, x1, y1 }
    }

    pub fn point(x: u32, y: u32) -> Self {
        Region::Point { x0: x, y0: y }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Region::Point { .. } => "POINT",
            Region::Rect { .. } => "BOX",
        }
    }

    pub fn is_well_formed(&self) -> bool {
        match *self {
            Region::Point { .. } => true,
            Region::Rect { x0, y0, x1, y1 } => x0 < x1 && y0 < y1,
        }
    }

    pub fn area(&self) -> u64 {
        match *self {
            Region::Point { .. } => 0,
            Region::Rect { x0, y0, x1, y1 } => {
                u64::from(x1.saturating_sub(x0)) * u64::from(y1.saturating_sub(y0))
            }
        }
    }

    pub fn fits(&self, image: &ImageRef) -> bool {
        match *self {
            Region::Point { x0, y0 } => x0 < image.width && y0 < image.height,
            Region::Rect { x1, y1, .. } => x1 <= image.width && y1 <= image.height,
        }
    }

    /// True when `self` is a box that contains the pixel `(x, y)`.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        match *self {
            Region::Rect { x0, y0, x1, y1 } => x0 <= x && x < x1 && y0 <= y && y < y1,
            Region::Point { .. } => false,
        }
    }

    pub fn intersection_area(&self, other: &Region) -> Result<u64, ModelError> {
        let (a, b) = (self.as_rect()?, other.as_rect()?);
        let w = a.2.min(b.2).saturating_sub(a.0.max(b.0));
        let h = a.3.min(b.3).saturating_sub(a.1.max(b.1));
        Ok(u64::from(w) * u64::from(h))
    }

    fn as_rect(&self) -> Result<(u32, u32, u32, u32), ModelError> {
        match *self {
            Region::Rect { x0, y0, x1, y1 } => Ok((x0, y0, x1, y1)),
            Region::Point { .. } => Err(ModelError::KindMismatch("POINT")),
        }
    }
}

/// Intersection over union of two boxes.
pub fn region_iou(a: &Region, b: &Region) -> Result<f64, ModelError> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingCode {
    Aneurysm,
    Hemorrhage,
    Nodule,
    Pneumothorax,
    Fracture,
    Effusion,
}

/// Surface phrases for each code. Lowercase, unique, one code each.
pub const LEXICON: &[(&str, FindingCode)] = &[
    ("aneurysm", FindingCode::Aneurysm),
    ("aneurysms", FindingCode::Aneurysm),
    ("hemorrhage", FindingCode::Hemorrhage),
    ("intracranial hemorrhage", FindingCode::Hemorrhage),
    ("bleed", FindingCode::Hemorrhage),
    ("nodule", FindingCode::Nodule),
    ("nodules", FindingCode::Nodule),
    ("pulmonary nodule", FindingCode::Nodule),
    ("pneumothorax", FindingCode::Pneumothorax),
    ("fracture", FindingCode::Fracture),
    ("fractures", FindingCode::Fracture),
    ("effusion", FindingCode::Effusion),
    ("effusions", FindingCode::Effusion),
    ("pleural effusion", FindingCode::Effusion),
];

impl FindingCode {
    pub const ALL: [FindingCode; 6] = [
        FindingCode::Aneurysm,
        FindingCode::Hemorrhage,
        FindingCode::Nodule,
        FindingCode::Pneumothorax,
        FindingCode::Fracture,
        FindingCode::Effusion,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FindingCode::Aneurysm => "ANEURYSM",
            FindingCode::Hemorrhage => "HEMORRHAGE",
            FindingCode::Nodule => "NODULE",
            FindingCode::Pneumothorax => "PNEUMOTHORAX",
            FindingCode::Fracture => "FRACTURE",
            FindingCode::Effusion => "EFFUSION",
        }
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).expect("ALL lists every code")
    }

    pub fn phrases(&self) -> impl Iterator<Item = &'static str> + '_ {
        LEXICON.iter().filter(move |(_, c)| c == self).map(|(p, _)| *p)
    }

    /// Singular phrase used when rendering.
    pub fn singular(&self) -> &'static str {
        match self {
            FindingCode::Aneurysm => "aneurysm",
            FindingCode::Hemorrhage => "hemorrhage",
            FindingCode::Nodule => "nodule",
            FindingCode::Pneumothorax => "pneumothorax",
            FindingCode::Fracture => "fracture",
            FindingCode::Effusion => "effusion",
        }
    }
}

impl fmt::Display for FindingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FindingCode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| ModelError::UnknownFinding(s.to_owned()))
    }
}

pub fn lookup_phrase(phrase: &str) -> Option<FindingCode> {
    LEXICON.iter().find(|(p, _)| *p == phrase).map(|(_, c)| *c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MeasurementUnit {
    #[serde(rename = "mm")]
    Mm,
    #[serde(rename = "cm")]
    Cm,
}

impl MeasurementUnit {
    pub fn as_str(&self) -> &'static str {
        match self {
            MeasurementUnit::Mm => "mm",
            MeasurementUnit::Cm => "cm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub value: f64,
    pub unit: MeasurementUnit,
}

impl Measurement {
    pub fn new(value: f64, unit: MeasurementUnit) -> Result<Self, ModelError> {
        if !(value.is_finite() && value > 0.0) {
            return Err(ModelError::Measurement(format!("{value}{}", unit.as_str())));
        }
        Ok(Self { value, unit })
    }
}

/// Shortest decimal form, no trailing zeros: `5.2mm`, `12mm`.
impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.value, self.unit.as_str())
    }
}

impl FromStr for Measurement {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::Measurement(s.to_owned());
        let (number, unit) = if let Some(n) = s.strip_suffix("mm") {
            (n, MeasurementUnit::Mm)
        } else if let Some(n) = s.strip_suffix("cm") {
            (n, MeasurementUnit::Cm)
        } else {
            return Err(bad());
        };
        if !is_plain_decimal(number) {
            return Err(bad());
        }
        let value: f64 = number.parse().map_err(|_| bad())?;
        Measurement::new(value, unit).map_err(|_| bad())
    }
}

/// `digits` or `digits.digits`.
pub(crate) fn is_plain_decimal(s: &str) -> bool {
    let mut parts = s.splitn(2, '.');
    let int = parts.next().unwrap_or("");
    let frac = parts.next();
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    digits(int) && frac.map_or(true, digits)
}

/// One violated invariant, addressed by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub rule: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, rule: impl Into<String>) -> Self {
        Self { path: path.into(), rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.rule)
    }
}

pub fn validate_study(s: &StudyRecord) -> Result<(), Vec<Violation>> {
    let v = study_violations(s);
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Validates a study together with regions attached to it (anchors,
/// labels, detections), each given with the image it refers to.
pub fn validate_study_with_regions<'a>(
    s: &StudyRecord,
    regions: impl IntoIterator<Item = (&'a str, &'a Region)>,
) -> Result<(), Vec<Violation>> {
    let mut v = study_violations(s);
    for (i, (image_uid, region)) in regions.into_iter().enumerate() {
        let path = format!("regions[{i}]");
        v.extend(region_violations(&path, region, s.image(image_uid), image_uid));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

pub fn region_violations(
    path: &str,
    region: &Region,
    image: Option<&ImageRef>,
    image_uid: &str,
) -> Vec<Violation> {
    let mut v = Vec::new();
    if !region.is_well_formed() {
        v.push(Violation::new(path, "degenerate box"));
    }
    match image {
        None => v.push(Violation::new(path, format!("unknown image '{image_uid}'"))),
        Some(img) if !region.fits(img) => v.push(Violation::new(path, "region out of image bounds")),
        Some(_) => {}
    }
    v
}

fn study_violations(s: &StudyRecord) -> Vec<Violation> {
    let mut v = Vec::new();
    if s.study_uid.trim().is_empty() {
        v.push(Violation::new("study_uid", "identifier nonempty"));
    }
    if s.site_id.trim().is_empty() {
        v.push(Violation::new("site_id", "identifier nonempty"));
    }
    if s.images.is_empty() {
        v.push(Violation::new("images", "images nonempty"));
    }
    let mut seen = BTreeSet::new();
    for (i, img) in s.images.iter().enumerate() {
        let p = format!("images[{i}]");
        if !seen.insert(img.image_uid.as_str()) {
            v.push(Violation::new(format!("{p}.image_uid"), "image_uid unique within study"));
        }
        if img.image_uid.trim().is_empty() {
            v.push(Violation::new(format!("{p}.image_uid"), "identifier nonempty"));
        }
        if img.width == 0 {
            v.push(Violation::new(format!("{p}.width"), "width > 0"));
        }
        if img.height == 0 {
            v.push(Violation::new(format!("{p}.height"), "height > 0"));
        }
        if img.frame_count == 0 {
            v.push(Violation::new(format!("{p}.frame_count"), "frame_count >= 1"));
        }
    }
    let id = &s.identity;
    let has = |t: &str| id.phi_tokens.iter().any(|p| p == t);
    if !id.patient_name.is_empty() && !has(&id.patient_name) {
        v.push(Violation::new("identity.phi_tokens", "phi_tokens include patient_name"));
    }
    if !has(&id.patient_id) {
        v.push(Violation::new("identity.phi_tokens", "phi_tokens include patient_id"));
    }
    for (i, t) in id.phi_tokens.iter().enumerate() {
        if t.is_empty() {
            v.push(Violation::new(format!("identity.phi_tokens[{i}]"), "phi_token nonempty"));
        }
    }
    v
}
