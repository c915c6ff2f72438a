//! Site-side de-identification: keyed pseudonyms, per-patient date shifts
//! and denylist scrubbing of free text, with an independent leak scanner.

use crate::canonical::{canonical_digest, from_canonical, to_canonical, CanonicalError, Digest};
use crate::model::StudyRecord;
use crate::report::{build_report, parse_anchors, InteractiveReport, ParseError, Span};
use aho_corasick::{AhoCorasick, AhoCorasickBuilder, MatchKind};
use chrono::{DateTime, Duration, Utc};
use data_encoding::BASE32;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use std::collections::BTreeMap;
use std::fmt;

pub const SITE_SECRET_ENV: &str = "LABELLOOP_SITE_SECRET";
pub const REDACTED: &str = "[REDACTED]";
pub const PSEUDONYM_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum DeidError {
    #[error("site secret is empty")]
    EmptySecret,
    #[error("site secret is not valid hex")]
    SecretEncoding,
    #[error("cannot pseudonymize an empty value (scope '{0}')")]
    EmptyValue(String),
    #[error("policy has no action for required field {0:?}")]
    PolicyMissing(DeidField),
    #[error("policy action {action:?} is not allowed for {field:?}")]
    PolicyDisallowed { field: DeidField, action: DeidAction },
    #[error("phi_tokens[{0}] is empty")]
    EmptyPhiToken(usize),
    #[error("report {report_uid} no longer parses after scrubbing: {source}")]
    Reparse { report_uid: String, source: ParseError },
    #[error("date shift moved {0} out of range")]
    DateRange(&'static str),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

/// Keyed secret of one site. Never serialized.
#[derive(Clone, PartialEq, Eq)]
pub struct SiteSecret(Vec<u8>);

impl SiteSecret {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, DeidError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(DeidError::EmptySecret);
        }
        Ok(Self(bytes))
    }

    pub fn from_hex(s: &str) -> Result<Self, DeidError> {
        Self::new(hex::decode(s.trim()).map_err(|_| DeidError::SecretEncoding)?)
    }

    /// Reads `LABELLOOP_SITE_SECRET`, if set.
    pub fn from_env() -> Result<Option<Self>, DeidError> {
        match std::env::var(SITE_SECRET_ENV) {
            Ok(v) => Self::from_hex(&v).map(Some),
            Err(_) => Ok(None),
        }
    }

    fn mac(&self) -> Hmac<Sha256> {
        Hmac::<Sha256>::new_from_slice(&self.0).expect("hmac accepts any key length")
    }
}

impl fmt::Debug for SiteSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SiteSecret(<{} bytes>)", self.0.len())
    }
}

/// First 16 characters of base32(HMAC-SHA256(secret, scope ‖ 0x1F ‖ value)).
pub fn pseudonymize(secret: &SiteSecret, scope: &str, value: &str) -> Result<String, DeidError> {
    if value.is_empty() {
        return Err(DeidError::EmptyValue(scope.to_owned()));
    }
    let mut mac = secret.mac();
    mac.update(scope.as_bytes());
    mac.update(&[0x1f]);
    mac.update(value.as_bytes());
    let tag = mac.finalize().into_bytes();
    let mut token = BASE32.encode(&tag);
    token.truncate(PSEUDONYM_LEN);
    Ok(token)
}

/// Per-patient shift in days, in `[-182, 182]`.
pub fn date_shift_days(secret: &SiteSecret, patient_id: &str) -> i64 {
    let mut mac = secret.mac();
    mac.update(patient_id.as_bytes());
    let tag = mac.finalize().into_bytes();
    let head = u32::from_be_bytes([tag[0], tag[1], tag[2], tag[3]]);
    i64::from(head % 365) - 182
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeidField {
    PatientName,
    PatientId,
    BirthDate,
    AccessionNumber,
    StudyUid,
    AcquiredAt,
    AuthoredAt,
    OrderText,
    ReportBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeidAction {
    Remove,
    Pseudonym,
    DateShift,
    ScrubText,
    Keep,
}

impl DeidField {
    pub const ALL: [DeidField; 9] = [
        DeidField::PatientName,
        DeidField::PatientId,
        DeidField::BirthDate,
        DeidField::AccessionNumber,
        DeidField::StudyUid,
        DeidField::AcquiredAt,
        DeidField::AuthoredAt,
        DeidField::OrderText,
        DeidField::ReportBody,
    ];

    fn allowed(&self) -> &'static [DeidAction] {
        use DeidAction::*;
        match self {
            DeidField::PatientName => &[Remove, ScrubText],
            DeidField::PatientId | DeidField::AccessionNumber | DeidField::StudyUid => &[Pseudonym],
            DeidField::BirthDate | DeidField::AcquiredAt | DeidField::AuthoredAt => &[DateShift],
            DeidField::OrderText | DeidField::ReportBody => &[ScrubText],
        }
    }
}

/// Field → action map. The secret is attached at runtime and never
/// written out with the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeidPolicy {
    pub actions: BTreeMap<DeidField, DeidAction>,
    #[serde(skip)]
    secret: Option<SiteSecret>,
}

impl DeidPolicy {
    pub fn standard(secret: SiteSecret) -> Self {
        let actions = DeidField::ALL.iter().map(|f| (*f, f.allowed()[0])).collect();
        Self { actions, secret: Some(secret) }
    }

    /// Parses a canonical policy record; the secret must be attached
    /// separately.
    pub fn from_policy_text(text: &str) -> Result<Self, DeidError> {
        Ok(from_canonical(text.trim())?)
    }

    pub fn to_policy_text(&self) -> String {
        to_canonical(self).expect("policy is canonical")
    }

    pub fn with_secret(mut self, secret: SiteSecret) -> Self {
        self.secret = Some(secret);
        self
    }

    pub fn validate(&self) -> Result<(), DeidError> {
        if self.secret.is_none() {
            return Err(DeidError::EmptySecret);
        }
        for field in DeidField::ALL {
            let action = *self.actions.get(&field).ok_or(DeidError::PolicyMissing(field))?;
            if !field.allowed().contains(&action) {
                return Err(DeidError::PolicyDisallowed { field, action });
            }
        }
        Ok(())
    }

    fn secret(&self) -> &SiteSecret {
        self.secret.as_ref().expect("validated")
    }

    fn action(&self, f: DeidField) -> DeidAction {
        self.actions[&f]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeidReceipt {
    pub original_digest: Digest,
    pub deid_digest: Digest,
    pub fields_transformed: Vec<String>,
    pub performed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeidOutput {
    pub study: StudyRecord,
    pub reports: Vec<InteractiveReport>,
    pub receipt: DeidReceipt,
}

fn matcher(tokens: &[String], kind: MatchKind) -> AhoCorasick {
    AhoCorasickBuilder::new()
        .ascii_case_insensitive(true)
        .match_kind(kind)
        .build(tokens.iter().filter(|t| !t.is_empty()))
        .expect("phi token automaton builds")
}

/// Replaces every token occurrence outside `protected` spans.
fn scrub(text: &str, ac: &AhoCorasick, protected: &[Span]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut at = 0;
    for m in ac.find_iter(text) {
        if protected.iter().any(|p| m.start() < p.end && p.start < m.end()) {
            continue;
        }
        out.push_str(&text[at..m.start()]);
        out.push_str(REDACTED);
        at = m.end();
    }
    out.push_str(&text[at..]);
    out
}

fn shift(t: DateTime<Utc>, days: i64) -> Result<DateTime<Utc>, DeidError> {
    t.checked_add_signed(Duration::days(days)).ok_or(DeidError::DateRange("timestamp"))
}

pub fn deidentify_study(
    study: &StudyRecord,
    reports: &[InteractiveReport],
    policy: &DeidPolicy,
    performed_at: DateTime<Utc>,
) -> Result<DeidOutput, DeidError> {
    policy.validate()?;
    if let Some(i) = study.identity.phi_tokens.iter().position(|t| t.is_empty()) {
        return Err(DeidError::EmptyPhiToken(i));
    }
    let secret = policy.secret();
    let id = &study.identity;
    let offset = date_shift_days(secret, &id.patient_id);
    let ac = matcher(&id.phi_tokens, MatchKind::LeftmostLongest);

    let patient_name = match policy.action(DeidField::PatientName) {
        DeidAction::ScrubText if !id.patient_name.is_empty() => REDACTED.to_owned(),
        _ => String::new(),
    };
    let patient_id = pseudonymize(secret, "patient", &id.patient_id)?;
    let accession_number = pseudonymize(secret, "accession", &id.accession_number)?;
    let study_uid = pseudonymize(secret, "study", &study.study_uid)?;
    let mut phi_tokens = vec![patient_id.clone(), accession_number.clone()];
    if !patient_name.is_empty() {
        phi_tokens.insert(0, patient_name.clone());
    }

    let mut out = study.clone();
    out.study_uid = study_uid;
    out.identity.patient_name = patient_name;
    out.identity.patient_id = patient_id;
    out.identity.accession_number = accession_number;
    out.identity.birth_date = id
        .birth_date
        .checked_add_signed(Duration::days(offset))
        .ok_or(DeidError::DateRange("birth_date"))?;
    out.identity.phi_tokens = phi_tokens;
    out.acquired_at = shift(study.acquired_at, offset)?;
    out.order_text = scrub(&study.order_text, &ac, &[]);

    let mut out_reports = Vec::with_capacity(reports.len());
    for r in reports {
        let protected: Vec<Span> = r.anchors.iter().map(|a| a.char_span).collect();
        let body = scrub(&r.body, &ac, &protected);
        let authored_at = shift(r.authored_at, offset)?;
        let rebuilt = build_report(&r.report_uid, &out, &r.author_id, authored_at, body)
            .map_err(|source| DeidError::Reparse { report_uid: r.report_uid.clone(), source })?;
        out_reports.push(rebuilt);
    }

    let mut fields_transformed = Vec::new();
    let mut note = |changed: bool, path: &str| {
        if changed {
            fields_transformed.push(path.to_owned());
        }
    };
    note(out.study_uid != study.study_uid, "study_uid");
    note(out.identity.patient_name != id.patient_name, "identity.patient_name");
    note(out.identity.patient_id != id.patient_id, "identity.patient_id");
    note(out.identity.birth_date != id.birth_date, "identity.birth_date");
    note(out.identity.accession_number != id.accession_number, "identity.accession_number");
    note(out.identity.phi_tokens != id.phi_tokens, "identity.phi_tokens");
    note(out.acquired_at != study.acquired_at, "acquired_at");
    note(out.order_text != study.order_text, "order_text");
    for (i, (a, b)) in reports.iter().zip(&out_reports).enumerate() {
        note(a.study_uid != b.study_uid, &format!("reports[{i}].study_uid"));
        note(a.authored_at != b.authored_at, &format!("reports[{i}].authored_at"));
        note(a.body != b.body, &format!("reports[{i}].body"));
    }

    let receipt = DeidReceipt {
        original_digest: canonical_digest(&(study, reports)),
        deid_digest: canonical_digest(&(&out, &out_reports)),
        fields_transformed,
        performed_at,
    };
    Ok(DeidOutput { study: out, reports: out_reports, receipt })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    pub field_path: String,
    pub offset: usize,
    pub token: String,
}

/// Every text field of a study bundle, with its path.
pub fn text_fields(study: &StudyRecord, reports: &[InteractiveReport]) -> Vec<(String, String)> {
    let id = &study.identity;
    let mut f = vec![
        ("study_uid".to_owned(), study.study_uid.clone()),
        ("site_id".to_owned(), study.site_id.clone()),
        ("identity.patient_name".to_owned(), id.patient_name.clone()),
        ("identity.patient_id".to_owned(), id.patient_id.clone()),
        ("identity.birth_date".to_owned(), id.birth_date.to_string()),
        ("identity.accession_number".to_owned(), id.accession_number.clone()),
        ("order_text".to_owned(), study.order_text.clone()),
    ];
    for (i, t) in id.phi_tokens.iter().enumerate() {
        f.push((format!("identity.phi_tokens[{i}]"), t.clone()));
    }
    for (i, img) in study.images.iter().enumerate() {
        f.push((format!("images[{i}].image_uid"), img.image_uid.clone()));
    }
    for (i, r) in reports.iter().enumerate() {
        f.push((format!("reports[{i}].report_uid"), r.report_uid.clone()));
        f.push((format!("reports[{i}].study_uid"), r.study_uid.clone()));
        f.push((format!("reports[{i}].author_id"), r.author_id.clone()));
        f.push((format!("reports[{i}].body"), r.body.clone()));
    }
    f
}

/// Case-insensitive scan of every text field for any of `phi_tokens`.
pub fn verify_deidentified(
    study: &StudyRecord,
    reports: &[InteractiveReport],
    phi_tokens: &[String],
) -> Result<(), Vec<Leak>> {
    let tokens: Vec<String> = phi_tokens.iter().filter(|t| !t.is_empty()).cloned().collect();
    if tokens.is_empty() {
        return Ok(());
    }
    let ac = matcher(&tokens, MatchKind::Standard);
    let mut leaks = Vec::new();
    for (path, text) in text_fields(study, reports) {
        for m in ac.find_overlapping_iter(&text) {
            leaks.push(Leak { field_path: path.clone(), offset: m.start(), token: tokens[m.pattern().as_usize()].clone() });
        }
    }
    if leaks.is_empty() {
        Ok(())
    } else {
        Err(leaks)
    }
}

/// Anchor token texts of a body, for checking they survive scrubbing.
pub fn anchor_tokens(body: &str) -> Result<Vec<String>, ParseError> {
    Ok(parse_anchors(body)?
        .into_iter()
        .map(|a| body[a.char_span.start..a.char_span.end].to_owned())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures;
    use chrono::TimeZone;

    fn secret() -> SiteSecret {
        SiteSecret::new(b"k".to_vec()).unwrap()
    }

    fn at() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 6, 1, 0, 0, 0).unwrap()
    }

    fn report(study: &StudyRecord, body: &str) -> InteractiveReport {
        build_report("R1", study, "dr-1", study.acquired_at, body.to_owned()).unwrap()
    }

    #[test]
    fn pseudonym_is_deterministic_and_scoped() {
        let a = pseudonymize(&secret(), "patient", "P001").unwrap();
        assert_eq!(a, pseudonymize(&secret(), "patient", "P001").unwrap());
        assert_eq!(a.len(), 16);
        assert_ne!(a, pseudonymize(&secret(), "accession", "P001").unwrap());
        assert!(matches!(pseudonymize(&secret(), "patient", ""), Err(DeidError::EmptyValue(_))));
        assert!(SiteSecret::new(Vec::new()).is_err());
    }

    #[test]
    fn shift_bounds() {
        for i in 0..500 {
            let d = date_shift_days(&secret(), &format!("P{i}"));
            assert!((-182..=182).contains(&d));
        }
    }

    #[test]
    fn literal_replacement() {
        let mut s = fixtures::study();
        s.order_text = "none".into();
        let r = report(&s, "Mr. John Doe presents with a nodule.");
        let out = deidentify_study(&s, &[r], &DeidPolicy::standard(secret()), at()).unwrap();
        assert_eq!(out.reports[0].body, "Mr. [REDACTED] presents with a nodule.");
    }

    #[test]
    fn scrub_is_case_insensitive_and_skips_anchors() {
        let s = fixtures::study();
        let anchor = "{{link|image=IMG1|frame=1|point=5,5}}";
        let r = report(&s, &format!("JOHN DOE, p001: nodule {anchor}."));
        let out = deidentify_study(&s, &[r], &DeidPolicy::standard(secret()), at()).unwrap();
        assert_eq!(out.reports[0].body, format!("[REDACTED], [REDACTED]: nodule {anchor}."));
        assert_eq!(anchor_tokens(&out.reports[0].body).unwrap(), vec![anchor.to_owned()]);
        assert_eq!(out.reports[0].study_uid, out.study.study_uid);
    }

    #[test]
    fn fixture_study_has_no_leaks() {
        let s = fixtures::study();
        let r = report(&s, "History for John Doe (P001, ACC-77). Nodule.");
        assert!(verify_deidentified(&s, std::slice::from_ref(&r), &s.identity.phi_tokens).is_err());
        let out = deidentify_study(&s, &[r], &DeidPolicy::standard(secret()), at()).unwrap();
        assert_eq!(verify_deidentified(&out.study, &out.reports, &s.identity.phi_tokens), Ok(()));
        assert_ne!(out.receipt.original_digest, out.receipt.deid_digest);
        assert!(out.receipt.fields_transformed.contains(&"reports[0].body".to_owned()));
        assert_eq!(crate::model::validate_study(&out.study), Ok(()));
    }

    #[test]
    fn leak_reported_with_path_and_offset() {
        let s = fixtures::study();
        let out = deidentify_study(&s, &[], &DeidPolicy::standard(secret()), at()).unwrap();
        let leaky = report(&out.study, "Seen with john doe today.");
        let leaks = verify_deidentified(&out.study, &[leaky], &s.identity.phi_tokens).unwrap_err();
        assert_eq!(
            leaks,
            vec![Leak { field_path: "reports[0].body".into(), offset: 10, token: "John Doe".into() }]
        );
    }

    #[test]
    fn same_patient_same_offset() {
        let a = fixtures::study();
        let mut b = fixtures::study();
        b.study_uid = "ST-0002".into();
        b.acquired_at = a.acquired_at + Duration::days(30);
        let p = DeidPolicy::standard(secret());
        let (da, db) = (deidentify_study(&a, &[], &p, at()).unwrap(), deidentify_study(&b, &[], &p, at()).unwrap());
        assert_eq!(db.study.acquired_at - da.study.acquired_at, Duration::days(30));
        assert_eq!(da.study.identity.patient_id, db.study.identity.patient_id);
        assert_ne!(da.study.study_uid, db.study.study_uid);
    }

    #[test]
    fn policy_errors() {
        let mut p = DeidPolicy::standard(secret());
        p.actions.remove(&DeidField::BirthDate);
        assert!(matches!(p.validate(), Err(DeidError::PolicyMissing(DeidField::BirthDate))));
        let mut p = DeidPolicy::standard(secret());
        p.actions.insert(DeidField::PatientId, DeidAction::Keep);
        assert!(matches!(p.validate(), Err(DeidError::PolicyDisallowed { field: DeidField::PatientId, .. })));
        let mut p = DeidPolicy::standard(secret());
        p.actions.insert(DeidField::PatientName, DeidAction::ScrubText);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn policy_text_round_trip_omits_secret() {
        let p = DeidPolicy::standard(secret());
        let text = p.to_policy_text();
        assert!(text.starts_with(r#"{"actions":{"accession_number":"PSEUDONYM","acquired_at":"DATE_SHIFT""#));
        let back = DeidPolicy::from_policy_text(&text).unwrap();
        assert!(back.validate().is_err());
        assert_eq!(back.with_secret(secret()), p);
    }

    #[test]
    fn secret_debug_is_redacted() {
        assert_eq!(format!("{:?}", SiteSecret::from_hex("0a0b").unwrap()), "SiteSecret(<2 bytes>)");
    }
}
