//! Interactive reports: inline hyperlink anchors, sentence segmentation,
//! finding mentions with negation, anchor binding and label extraction.
//!
//! Anchor grammar:
//!
//! ```text
//! {{link|image=<uid>|frame=<int>|region=<x0>,<y0>,<x1>,<y1>|meas=<decimal><unit>}}
//! {{link|image=<uid>|frame=<int>|point=<x>,<y>}}
//! ```
//!
//! `|meas=…` is optional. All offsets in this module are byte offsets into
//! the UTF-8 body.

use crate::model::{lookup_phrase, FindingCode, Measurement, Region, StudyRecord, Violation};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

const NEGATION_CUES: &[&str] = &["no", "without", "negative for", "resolved", "absent"];
/// Longest lexicon or cue phrase, in words.
const MAX_PHRASE_WORDS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("malformed header: {0}")]
    Header(String),
    #[error("malformed anchor at offset {offset}: {reason}")]
    Anchor { offset: usize, reason: String },
    #[error("anchor at offset {offset} references unknown image '{image_uid}'")]
    UnknownImage { offset: usize, image_uid: String },
    #[error("anchor at offset {offset}: {reason}")]
    OutOfRange { offset: usize, reason: String },
    #[error("report names study '{found}' but was parsed against '{expected}'")]
    StudyMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn contains(&self, offset: usize) -> bool {
        self.start <= offset && offset < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperlinkAnchor {
    pub image_uid: String,
    pub frame: u32,
    pub region: Region,
    pub measurement: Option<Measurement>,
    pub char_span: Span,
}

impl HyperlinkAnchor {
    /// The anchor's token text in the grammar above.
    pub fn render(image_uid: &str, frame: u32, region: &Region, meas: Option<&Measurement>) -> String {
        let mut s = format!("{{{{link|image={image_uid}|frame={frame}|");
        match *region {
            Region::Rect { x0, y0, x1, y1 } => s.push_str(&format!("region={x0},{y0},{x1},{y1}")),
            Region::Point { x0, y0 } => s.push_str(&format!("point={x0},{y0}")),
        }
        if let Some(m) = meas {
            s.push_str(&format!("|meas={m}"));
        }
        s.push_str("}}");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractiveReport {
    pub report_uid: String,
    pub study_uid: String,
    pub author_id: String,
    pub authored_at: DateTime<Utc>,
    pub body: String,
    pub anchors: Vec<HyperlinkAnchor>,
}

impl InteractiveReport {
    /// Corpus file text: a tab-separated header line followed by the body.
    pub fn to_corpus_text(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\n{}",
            self.report_uid,
            self.study_uid,
            self.author_id,
            self.authored_at.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true),
            self.body
        )
    }

    /// Body with every anchor token removed.
    pub fn plain_text(&self) -> String {
        let mut out = String::with_capacity(self.body.len());
        let mut at = 0;
        for a in &self.anchors {
            out.push_str(&self.body[at..a.char_span.start]);
            at = a.char_span.end;
        }
        out.push_str(&self.body[at..]);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strength {
    Hyperlinked,
    TextOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedLabel {
    pub report_uid: String,
    pub study_uid: String,
    pub finding: FindingCode,
    pub polarity: Polarity,
    pub strength: Strength,
    pub region: Option<Region>,
    pub image_uid: Option<String>,
    pub measurement: Option<Measurement>,
    pub sentence_index: usize,
}

impl ExtractedLabel {
    pub fn is_positive(&self) -> bool {
        self.polarity == Polarity::Positive
    }

    pub fn violations(&self, path: &str) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.strength == Strength::Hyperlinked && (self.region.is_none() || self.image_uid.is_none()) {
            v.push(Violation::new(path, "hyperlinked label carries region and image_uid"));
        }
        if self.polarity == Polarity::Negative && self.strength == Strength::Hyperlinked {
            v.push(Violation::new(path, "negative label is text-only"));
        }
        if let Some(r) = &self.region {
            if !r.is_well_formed() {
                v.push(Violation::new(path, "degenerate box"));
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UnboundReason {
    /// The anchor's sentence has no finding mention.
    NoMention,
    /// The nearest mention is negated; anchors never localize negatives.
    NegatedMention,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Diagnostic {
    UnboundAnchor { anchor_index: usize, sentence_index: usize, reason: UnboundReason },
    ConflictingPolarity { sentence_index: usize, finding: FindingCode },
}

/// Labels mined from one report, as shipped in a LABELSET envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub report_uid: String,
    pub study_uid: String,
    pub labels: Vec<ExtractedLabel>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub finding: FindingCode,
    pub sentence_index: usize,
    pub span: Span,
    pub negated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorBinding {
    pub anchor_index: usize,
    pub sentence_index: usize,
    /// Index into [`ReportStructure::mentions`].
    pub mention: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportStructure {
    pub sentences: Vec<Span>,
    pub mentions: Vec<Mention>,
    pub bindings: Vec<AnchorBinding>,
}

/// Parses a corpus file (header line + body) against its study.
pub fn parse_report(raw: &str, study: &StudyRecord) -> Result<InteractiveReport, ParseError> {
    let (header, body) = raw.split_once('\n').unwrap_or((raw, ""));
    let fields: Vec<&str> = header.split('\t').collect();
    let [report_uid, study_uid, author_id, authored_at] = fields[..] else {
        return Err(ParseError::Header(format!("expected 4 tab-separated fields, got {}", fields.len())));
    };
    let authored_at = DateTime::parse_from_rfc3339(authored_at)
        .map_err(|e| ParseError::Header(format!("authored_at: {e}")))?
        .with_timezone(&Utc);
    if study_uid != study.study_uid {
        return Err(ParseError::StudyMismatch {
            expected: study.study_uid.clone(),
            found: study_uid.to_owned(),
        });
    }
    build_report(report_uid, study, author_id, authored_at, body.to_owned())
}

/// Parses a body whose header fields are already known.
pub fn build_report(
    report_uid: &str,
    study: &StudyRecord,
    author_id: &str,
    authored_at: DateTime<Utc>,
    body: String,
) -> Result<InteractiveReport, ParseError> {
    let anchors = parse_anchors(&body)?;
    check_anchors(&anchors, study)?;
    Ok(InteractiveReport {
        report_uid: report_uid.to_owned(),
        study_uid: study.study_uid.clone(),
        author_id: author_id.to_owned(),
        authored_at,
        body,
        anchors,
    })
}

/// Locates and syntactically validates every anchor in `body`.
pub fn parse_anchors(body: &str) -> Result<Vec<HyperlinkAnchor>, ParseError> {
    let mut anchors = Vec::new();
    let mut from = 0;
    while let Some(rel) = body[from..].find("{{") {
        let start = from + rel;
        let inner_start = start + 2;
        let Some(close) = body[inner_start..].find("}}") else {
            return Err(anchor_err(start, "unterminated anchor"));
        };
        let inner = &body[inner_start..inner_start + close];
        if inner.contains("{{") {
            return Err(anchor_err(start, "nested anchor"));
        }
        let end = inner_start + close + 2;
        anchors.push(parse_anchor_inner(inner, Span { start, end })?);
        from = end;
    }
    Ok(anchors)
}

fn anchor_err(offset: usize, reason: impl Into<String>) -> ParseError {
    ParseError::Anchor { offset, reason: reason.into() }
}

fn parse_anchor_inner(inner: &str, span: Span) -> Result<HyperlinkAnchor, ParseError> {
    let err = |r: &str| anchor_err(span.start, r);
    let mut fields = inner.split('|');
    if fields.next() != Some("link") {
        return Err(err("expected 'link'"));
    }
    let image_uid = fields
        .next()
        .and_then(|f| f.strip_prefix("image="))
        .filter(|v| !v.is_empty())
        .ok_or_else(|| err("expected 'image=<uid>'"))?;
    let frame = fields
        .next()
        .and_then(|f| f.strip_prefix("frame="))
        .and_then(parse_uint)
        .filter(|f| *f >= 1)
        .ok_or_else(|| err("expected 'frame=<positive int>'"))?;
    let region_field = fields.next().ok_or_else(|| err("expected 'region=' or 'point='"))?;
    let region = if let Some(v) = region_field.strip_prefix("region=") {
        match parse_coords(v).as_deref() {
            Some(&[x0, y0, x1, y1]) => Region::rect(x0, y0, x1, y1),
            _ => return Err(err("expected 'region=<x0>,<y0>,<x1>,<y1>'")),
        }
    } else if let Some(v) = region_field.strip_prefix("point=") {
        match parse_coords(v).as_deref() {
            Some(&[x, y]) => Region::point(x, y),
            _ => return Err(err("expected 'point=<x>,<y>'")),
        }
    } else {
        return Err(err("expected 'region=' or 'point='"));
    };
    if !region.is_well_formed() {
        return Err(err("degenerate box"));
    }
    let measurement = match fields.next() {
        None => None,
        Some(f) => {
            let v = f.strip_prefix("meas=").ok_or_else(|| err("expected 'meas=<decimal><unit>'"))?;
            Some(v.parse::<Measurement>().map_err(|e| err(&e.to_string()))?)
        }
    };
    if fields.next().is_some() {
        return Err(err("unexpected trailing field"));
    }
    Ok(HyperlinkAnchor { image_uid: image_uid.to_owned(), frame, region, measurement, char_span: span })
}

fn parse_uint(s: &str) -> Option<u32> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

fn parse_coords(s: &str) -> Option<Vec<u32>> {
    s.split(',').map(parse_uint).collect()
}

/// Referential checks of anchors against the study's images.
pub fn check_anchors(anchors: &[HyperlinkAnchor], study: &StudyRecord) -> Result<(), ParseError> {
    for a in anchors {
        let offset = a.char_span.start;
        let Some(image) = study.image(&a.image_uid) else {
            return Err(ParseError::UnknownImage { offset, image_uid: a.image_uid.clone() });
        };
        if a.frame > image.frame_count {
            return Err(ParseError::OutOfRange {
                offset,
                reason: format!("frame {} exceeds frame_count {}", a.frame, image.frame_count),
            });
        }
        if !a.region.fits(image) {
            return Err(ParseError::OutOfRange { offset, reason: "region out of image bounds".into() });
        }
    }
    Ok(())
}

/// Sentence spans. Terminators are `.`, `!` or `?` outside anchors followed
/// by whitespace or end of text; whitespace-only pieces are dropped.
pub fn segment_sentences(body: &str, anchors: &[HyperlinkAnchor]) -> Vec<Span> {
    let in_anchor = |i: usize| anchors.iter().any(|a| a.char_span.contains(i));
    let bytes = body.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let push = |start: usize, end: usize, out: &mut Vec<Span>| {
        if !body[start..end].trim().is_empty() {
            out.push(Span { start, end });
        }
    };
    for (i, c) in body.char_indices() {
        if matches!(c, '.' | '!' | '?') && !in_anchor(i) {
            let next = i + 1;
            let at_boundary = next >= bytes.len()
                || body[next..].chars().next().is_some_and(char::is_whitespace);
            if at_boundary {
                push(start, next, &mut out);
                start = next;
            }
        }
    }
    push(start, body.len(), &mut out);
    out
}

#[derive(Debug)]
struct Word {
    text: String,
    span: Span,
}

/// Lowercased alphanumeric runs of `sentence` that lie outside anchors.
fn words(body: &str, sentence: Span, anchors: &[HyperlinkAnchor]) -> Vec<Word> {
    let mut out = Vec::new();
    let mut cur: Option<(usize, String)> = None;
    let slice = &body[sentence.start..sentence.end];
    let flush = |cur: &mut Option<(usize, String)>, end: usize, out: &mut Vec<Word>| {
        if let Some((s, t)) = cur.take() {
            out.push(Word { text: t, span: Span { start: s, end } });
        }
    };
    for (rel, c) in slice.char_indices() {
        let i = sentence.start + rel;
        let inside = anchors.iter().any(|a| a.char_span.contains(i));
        if c.is_alphanumeric() && !inside {
            match &mut cur {
                Some((_, t)) => t.extend(c.to_lowercase()),
                None => cur = Some((i, c.to_lowercase().collect())),
            }
        } else {
            flush(&mut cur, i, &mut out);
        }
    }
    flush(&mut cur, sentence.end, &mut out);
    out
}

enum Hit {
    Finding(FindingCode),
    Cue,
}

/// Longest phrase starting at `words[i]` whose words are separated only by
/// whitespace. Returns the hit and its length in words.
fn match_phrase(body: &str, words: &[Word], i: usize) -> Option<(Hit, usize)> {
    for n in (1..=MAX_PHRASE_WORDS.min(words.len() - i)).rev() {
        let group = &words[i..i + n];
        let contiguous = group
            .windows(2)
            .all(|w| body[w[0].span.end..w[1].span.start].chars().all(char::is_whitespace));
        if !contiguous {
            continue;
        }
        let phrase = group.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
        if let Some(code) = lookup_phrase(&phrase) {
            return Some((Hit::Finding(code), n));
        }
        if NEGATION_CUES.contains(&phrase.as_str()) {
            return Some((Hit::Cue, n));
        }
    }
    None
}

/// Finding mentions in `sentence`, each flagged negated when a cue
/// precedes it within the sentence.
fn sentence_mentions(body: &str, sentence: Span, index: usize, anchors: &[HyperlinkAnchor]) -> Vec<Mention> {
    let words = words(body, sentence, anchors);
    let mut out = Vec::new();
    let mut negated = false;
    let mut i = 0;
    while i < words.len() {
        match match_phrase(body, &words, i) {
            Some((Hit::Finding(finding), n)) => {
                let span = Span { start: words[i].span.start, end: words[i + n - 1].span.end };
                out.push(Mention { finding, sentence_index: index, span, negated });
                i += n;
            }
            Some((Hit::Cue, n)) => {
                negated = true;
                i += n;
            }
            None => i += 1,
        }
    }
    out
}

/// Sentences, mentions and the anchor→mention binding of a parsed report.
pub fn analyze(report: &InteractiveReport) -> ReportStructure {
    let body = report.body.as_str();
    let sentences = segment_sentences(body, &report.anchors);
    let mentions: Vec<Mention> = sentences
        .iter()
        .enumerate()
        .flat_map(|(i, s)| sentence_mentions(body, *s, i, &report.anchors))
        .collect();
    let bindings = report
        .anchors
        .iter()
        .enumerate()
        .map(|(anchor_index, a)| {
            let sentence_index = sentences
                .iter()
                .position(|s| s.contains(a.char_span.start))
                .expect("every anchor lies in a sentence");
            let in_sentence = || mentions.iter().enumerate().filter(|(_, m)| m.sentence_index == sentence_index);
            let left = in_sentence()
                .filter(|(_, m)| m.span.end <= a.char_span.start)
                .max_by_key(|(_, m)| m.span.end);
            let right = || {
                in_sentence()
                    .filter(|(_, m)| m.span.start >= a.char_span.end)
                    .min_by_key(|(_, m)| m.span.start)
            };
            let mention = left.or_else(right).map(|(i, _)| i);
            AnchorBinding { anchor_index, sentence_index, mention }
        })
        .collect();
    ReportStructure { sentences, mentions, bindings }
}

/// Binds each anchor to the nearest mention on its left in the same
/// sentence, else the nearest on its right, else nothing.
pub fn bind_anchors(report: &InteractiveReport) -> Vec<(AnchorBinding, Option<Mention>)> {
    let st = analyze(report);
    st.bindings
        .iter()
        .map(|b| (b.clone(), b.mention.map(|m| st.mentions[m].clone())))
        .collect()
}

/// One label per (sentence, finding, polarity) mention group; a positive
/// group with bound anchors yields one hyperlinked label per anchor.
pub fn extract_labels(report: &InteractiveReport) -> LabelSet {
    let st = analyze(report);
    let mut labels = Vec::new();
    let mut diagnostics = Vec::new();

    // groups in order of first mention
    let mut groups: Vec<(usize, FindingCode, Polarity, Vec<usize>)> = Vec::new();
    for (mi, m) in st.mentions.iter().enumerate() {
        let pol = if m.negated { Polarity::Negative } else { Polarity::Positive };
        match groups.iter_mut().find(|g| g.0 == m.sentence_index && g.1 == m.finding && g.2 == pol) {
            Some(g) => g.3.push(mi),
            None => groups.push((m.sentence_index, m.finding, pol, vec![mi])),
        }
    }

    let mut conflicts = BTreeSet::new();
    for (sentence_index, finding, polarity, members) in &groups {
        let bound: Vec<&AnchorBinding> = st
            .bindings
            .iter()
            .filter(|b| b.mention.is_some_and(|m| members.contains(&m)))
            .collect();
        let base = ExtractedLabel {
            report_uid: report.report_uid.clone(),
            study_uid: report.study_uid.clone(),
            finding: *finding,
            polarity: *polarity,
            strength: Strength::TextOnly,
            region: None,
            image_uid: None,
            measurement: None,
            sentence_index: *sentence_index,
        };
        if *polarity == Polarity::Positive && !bound.is_empty() {
            for b in bound {
                let a = &report.anchors[b.anchor_index];
                labels.push(ExtractedLabel {
                    strength: Strength::Hyperlinked,
                    region: Some(a.region),
                    image_uid: Some(a.image_uid.clone()),
                    measurement: a.measurement,
                    ..base.clone()
                });
            }
        } else {
            for b in bound {
                diagnostics.push(Diagnostic::UnboundAnchor {
                    anchor_index: b.anchor_index,
                    sentence_index: b.sentence_index,
                    reason: UnboundReason::NegatedMention,
                });
            }
            labels.push(base);
        }
        let opposite = groups
            .iter()
            .any(|g| g.0 == *sentence_index && g.1 == *finding && g.2 != *polarity);
        if opposite && conflicts.insert((*sentence_index, *finding)) {
            diagnostics.push(Diagnostic::ConflictingPolarity { sentence_index: *sentence_index, finding: *finding });
        }
    }
    for b in st.bindings.iter().filter(|b| b.mention.is_none()) {
        diagnostics.push(Diagnostic::UnboundAnchor {
            anchor_index: b.anchor_index,
            sentence_index: b.sentence_index,
            reason: UnboundReason::NoMention,
        });
    }
    LabelSet {
        report_uid: report.report_uid.clone(),
        study_uid: report.study_uid.clone(),
        labels,
        diagnostics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures;
    use crate::model::MeasurementUnit;
    use chrono::TimeZone;

    const FIG2: &str = "Small aneurysm {{link|image=IMG2|frame=34|region=120,88,150,118|meas=5.2mm}} of the basilar tip.";

    fn report(body: &str) -> InteractiveReport {
        let t = Utc.with_ymd_and_hms(2024, 3, 5, 15, 0, 0).unwrap();
        build_report("R1", &fixtures::study(), "dr-1", t, body.to_owned()).unwrap()
    }

    #[test]
    fn no_anchors() {
        assert!(report("Lungs are clear.").anchors.is_empty());
    }

    #[test]
    fn aneurysm_anchor_parses() {
        let r = report(FIG2);
        assert_eq!(r.anchors.len(), 1);
        let a = &r.anchors[0];
        assert_eq!(a.image_uid, "IMG2");
        assert_eq!(a.frame, 34);
        assert_eq!(a.region, Region::rect(120, 88, 150, 118));
        assert_eq!(a.region.area(), 30 * 30);
        assert_eq!(a.measurement, Some(Measurement { value: 5.2, unit: MeasurementUnit::Mm }));
        assert_eq!(
            &r.body[a.char_span.start..a.char_span.end],
            "{{link|image=IMG2|frame=34|region=120,88,150,118|meas=5.2mm}}"
        );
        assert_eq!(r.plain_text(), "Small aneurysm  of the basilar tip.");
    }

    #[test]
    fn aneurysm_label() {
        let set = extract_labels(&report(FIG2));
        assert!(set.diagnostics.is_empty());
        assert_eq!(set.labels.len(), 1);
        let l = &set.labels[0];
        assert_eq!((l.finding, l.polarity, l.strength), (FindingCode::Aneurysm, Polarity::Positive, Strength::Hyperlinked));
        assert_eq!(l.region, Some(Region::rect(120, 88, 150, 118)));
        assert_eq!(l.measurement.unwrap().to_string(), "5.2mm");
        assert_eq!(l.image_uid.as_deref(), Some("IMG2"));
    }

    #[test]
    fn unknown_image_is_referential_error() {
        let t = Utc.with_ymd_and_hms(2024, 3, 5, 15, 0, 0).unwrap();
        let body = "Nodule {{link|image=IMG9|frame=1|point=3,4}}.".to_owned();
        let err = build_report("R1", &fixtures::study(), "dr", t, body).unwrap_err();
        assert_eq!(err, ParseError::UnknownImage { offset: 7, image_uid: "IMG9".into() });
    }

    #[test]
    fn malformed_anchors_report_offset() {
        let cases = [
            ("A {{link|image=IMG1|frame=1|point=3,4", "unterminated"),
            ("A {{lnk|image=IMG1|frame=1|point=3,4}}", "link"),
            ("A {{link|image=|frame=1|point=3,4}}", "image"),
            ("A {{link|image=IMG1|frame=0|point=3,4}}", "frame"),
            ("A {{link|image=IMG1|frame=-2|point=3,4}}", "frame"),
            ("A {{link|image=IMG1|frame=1|region=3,4,5}}", "region"),
            ("A {{link|image=IMG1|frame=1|region=5,4,5,9}}", "degenerate"),
            ("A {{link|image=IMG1|frame=1|point=3,4|meas=5.2in}}", "measurement"),
            ("A {{link|image=IMG1|frame=1|point=3,4|meas=2mm|x=1}}", "trailing"),
            ("A {{link|image=IMG1|frame=1|size=3,4}}", "point"),
        ];
        for (body, needle) in cases {
            match parse_anchors(body) {
                Err(ParseError::Anchor { offset, reason }) => {
                    assert_eq!(offset, 2, "{body}");
                    assert!(reason.contains(needle), "{body}: {reason}");
                }
                other => panic!("{body}: {other:?}"),
            }
        }
    }

    #[test]
    fn frame_beyond_frame_count() {
        let t = Utc.with_ymd_and_hms(2024, 3, 5, 15, 0, 0).unwrap();
        let body = "Nodule {{link|image=IMG1|frame=41|point=3,4}}.".to_owned();
        let err = build_report("R1", &fixtures::study(), "dr", t, body).unwrap_err();
        assert!(matches!(err, ParseError::OutOfRange { offset: 7, .. }));
    }

    #[test]
    fn corpus_header_round_trip() {
        let r = report(FIG2);
        let again = parse_report(&r.to_corpus_text(), &fixtures::study()).unwrap();
        assert_eq!(again, r);
        let mut other = fixtures::study();
        other.study_uid = "ST-9".into();
        assert!(matches!(parse_report(&r.to_corpus_text(), &other), Err(ParseError::StudyMismatch { .. })));
        assert!(matches!(parse_report("R1\tST-0001\n", &fixtures::study()), Err(ParseError::Header(_))));
    }

    #[test]
    fn sentences_do_not_split_inside_anchors() {
        let r = report("First. Nodule {{link|image=IMG1|frame=1|region=1,1,9,9|meas=2.5cm}} here! Third?  ");
        let s = segment_sentences(&r.body, &r.anchors);
        assert_eq!(s.len(), 3);
        assert!(r.body[s[1].start..s[1].end].trim().starts_with("Nodule {{link"));
        assert!(r.body[s[1].start..s[1].end].ends_with("here!"));
    }

    #[test]
    fn decimal_without_following_space_does_not_split() {
        let r = report("Measures 5.2 cm. Done.");
        assert_eq!(segment_sentences(&r.body, &r.anchors).len(), 2);
    }

    const A: &str = "{{link|image=IMG1|frame=2|region=10,10,20,20}}";

    #[test]
    fn single_candidate_binding() {
        let r = report(&format!("There is a nodule {A}."));
        let b = bind_anchors(&r);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].1.as_ref().unwrap().finding, FindingCode::Nodule);
    }

    /// Independent nearest-mention search: scans every mention in the
    /// sentence, measures the gap on each side and keeps the minimum with
    /// left preferred.
    fn nearest_by_distance(mentions: &[(usize, usize, FindingCode)], anchor: (usize, usize)) -> Option<FindingCode> {
        let left = mentions.iter().filter(|m| m.1 <= anchor.0).min_by_key(|m| anchor.0 - m.1);
        let right = mentions.iter().filter(|m| m.0 >= anchor.1).min_by_key(|m| m.0 - anchor.1);
        left.or(right).map(|m| m.2)
    }

    #[test]
    fn binds_nearest_left_of_two_mentions() {
        let body = format!("There is a fracture and nodule {A}.");
        let r = report(&body);
        let mentions = [
            (body.find("fracture").unwrap(), body.find("fracture").unwrap() + 8, FindingCode::Fracture),
            (body.find("nodule").unwrap(), body.find("nodule").unwrap() + 6, FindingCode::Nodule),
        ];
        let span = r.anchors[0].char_span;
        let expected = nearest_by_distance(&mentions, (span.start, span.end));
        assert_eq!(expected, Some(FindingCode::Nodule));
        assert_eq!(bind_anchors(&r)[0].1.as_ref().map(|m| m.finding), expected);
    }

    #[test]
    fn binds_right_when_nothing_left() {
        let r = report(&format!("See {A} the fracture and effusion."));
        assert_eq!(bind_anchors(&r)[0].1.as_ref().unwrap().finding, FindingCode::Fracture);
    }

    #[test]
    fn anchor_without_mention_is_unbound() {
        let r = report(&format!("Measured here {A}."));
        assert_eq!(bind_anchors(&r)[0].1, None);
        let set = extract_labels(&r);
        assert!(set.labels.is_empty());
        assert_eq!(
            set.diagnostics,
            vec![Diagnostic::UnboundAnchor { anchor_index: 0, sentence_index: 0, reason: UnboundReason::NoMention }]
        );
    }

    #[test]
    fn anchors_never_bind_across_sentences() {
        let r = report(&format!("There is a nodule. {A} Stable."));
        assert_eq!(bind_anchors(&r)[0].1, None);
    }

    #[test]
    fn negated_mention() {
        let set = extract_labels(&report("No intracranial hemorrhage."));
        assert_eq!(set.labels.len(), 1);
        let l = &set.labels[0];
        assert_eq!((l.finding, l.polarity, l.strength), (FindingCode::Hemorrhage, Polarity::Negative, Strength::TextOnly));
        assert!(set.diagnostics.is_empty());
    }

    #[test]
    fn negation_scope_is_rest_of_sentence() {
        let set = extract_labels(&report("There is a nodule without effusion. Pneumothorax."));
        let got: Vec<_> = set.labels.iter().map(|l| (l.finding, l.polarity, l.sentence_index)).collect();
        assert_eq!(
            got,
            [
                (FindingCode::Nodule, Polarity::Positive, 0),
                (FindingCode::Effusion, Polarity::Negative, 0),
                (FindingCode::Pneumothorax, Polarity::Positive, 1),
            ]
        );
    }

    #[test]
    fn cue_words_match_whole_words_only() {
        let set = extract_labels(&report("Nora has a nodule. Notable pneumothorax."));
        assert!(set.labels.iter().all(|l| l.polarity == Polarity::Positive));
        let set = extract_labels(&report("Negative for pleural effusion."));
        assert_eq!(set.labels[0].polarity, Polarity::Negative);
        assert_eq!(set.labels[0].finding, FindingCode::Effusion);
    }

    #[test]
    fn anchor_on_negated_mention_is_diagnosed() {
        let set = extract_labels(&report(&format!("No nodule {A}.")));
        assert_eq!(set.labels.len(), 1);
        assert_eq!(set.labels[0].strength, Strength::TextOnly);
        assert_eq!(
            set.diagnostics,
            vec![Diagnostic::UnboundAnchor { anchor_index: 0, sentence_index: 0, reason: UnboundReason::NegatedMention }]
        );
    }

    #[test]
    fn multiple_anchors_on_one_mention() {
        let b = "{{link|image=IMG2|frame=5|point=300,300}}";
        let set = extract_labels(&report(&format!("There are 2 nodules {A} {b} in the right lung.")));
        assert_eq!(set.labels.len(), 2);
        assert!(set.labels.iter().all(|l| l.strength == Strength::Hyperlinked && l.finding == FindingCode::Nodule));
        assert_eq!(set.labels[1].region, Some(Region::point(300, 300)));
    }

    #[test]
    fn conflicting_polarity_diagnostic() {
        let set = extract_labels(&report("Nodule on the left, no nodule on the right."));
        assert_eq!(set.labels.len(), 2);
        assert_eq!(
            set.diagnostics,
            vec![Diagnostic::ConflictingPolarity { sentence_index: 0, finding: FindingCode::Nodule }]
        );
    }

    #[test]
    fn unmentioned_codes_produce_nothing() {
        assert!(extract_labels(&report("Comparison with prior exam. Technique standard.")).labels.is_empty());
    }

    #[test]
    fn phrases_split_by_anchor_do_not_join() {
        let set = extract_labels(&report(&format!("Pulmonary {A} nodule.")));
        assert_eq!(set.labels.len(), 1);
        assert_eq!(set.labels[0].finding, FindingCode::Nodule);
    }
}
