//! NOTAM corpus ingestion: ICAO item parsing, Q-code decoding, and corpus
//! statistics.
//!
//! Items are recognized by their lettered markers (`Q)`, `A)` .. `E)`) either
//! at the start of a line or after whitespace; item content runs to the next
//! marker or the end of text. Real-world NOTAMs are inconsistently formatted,
//! so anything unparseable yields an absent optional rather than an error.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("malformed Q-code: {0:?}")]
    MalformedQCode(String),
    #[error("corpus contains no valid records")]
    CorpusEmpty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Operational category encoded by the second letter of a Q-code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QCategory {
    AirspaceRestrictions,
    FacilitiesAndServices,
    WarningInformation,
    LightingFacilities,
    MovementAreas,
    InstrumentSystems,
    NavigationFacilities,
    AirspaceOrganization,
    FlightProcedures,
    Unknown,
}

impl QCategory {
    pub fn from_subject_letter(letter: char) -> Self {
        match letter.to_ascii_uppercase() {
            'R' => QCategory::AirspaceRestrictions,
            'F' => QCategory::FacilitiesAndServices,
            'W' => QCategory::WarningInformation,
            'L' => QCategory::LightingFacilities,
            'M' => QCategory::MovementAreas,
            'I' => QCategory::InstrumentSystems,
            'N' => QCategory::NavigationFacilities,
            'A' => QCategory::AirspaceOrganization,
            'P' => QCategory::FlightProcedures,
            _ => QCategory::Unknown,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            QCategory::AirspaceRestrictions => "Airspace Restrictions",
            QCategory::FacilitiesAndServices => "Facilities and Services",
            QCategory::WarningInformation => "Warning Information",
            QCategory::LightingFacilities => "Lighting Facilities",
            QCategory::MovementAreas => "Movement Areas",
            QCategory::InstrumentSystems => "Instrument Systems",
            QCategory::NavigationFacilities => "Navigation Facilities",
            QCategory::AirspaceOrganization => "Airspace Organization",
            QCategory::FlightProcedures => "Flight Procedures",
            QCategory::Unknown => "UNKNOWN",
        }
    }
}

impl fmt::Display for QCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QCode {
    pub raw: String,
    pub subject_letter: char,
    pub category: QCategory,
}

/// Decode a raw Q-code (e.g. `QRTCA`) into its subject category.
///
/// Total over `Q` + letter inputs: unmapped subject letters decode to
/// [`QCategory::Unknown`] rather than failing.
pub fn decode_qcode(raw: &str) -> Result<QCode, CorpusError> {
    let mut chars = raw.chars();
    let first = chars.next();
    let second = chars.next();
    match (first, second) {
        (Some(q), Some(subject)) if q.eq_ignore_ascii_case(&'Q') => {
            let subject_letter = subject.to_ascii_uppercase();
            Ok(QCode {
                raw: raw.to_string(),
                subject_letter,
                category: QCategory::from_subject_letter(subject_letter),
            })
        }
        _ => Err(CorpusError::MalformedQCode(raw.to_string())),
    }
}

/// End of a NOTAM's validity window: a concrete timestamp or the `PERM`
/// sentinel from item C.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidityEnd {
    At(DateTime<Utc>),
    Permanent,
}

impl Serialize for ValidityEnd {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            ValidityEnd::At(t) => serializer.serialize_str(&t.to_rfc3339()),
            ValidityEnd::Permanent => serializer.serialize_str("PERMANENT"),
        }
    }
}

impl<'de> Deserialize<'de> for ValidityEnd {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s == "PERMANENT" || s == "PERM" {
            return Ok(ValidityEnd::Permanent);
        }
        parse_timestamp(&s)
            .map(ValidityEnd::At)
            .ok_or_else(|| serde::de::Error::custom(format!("unrecognized validity end {s:?}")))
    }
}

/// One parsed NOTAM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotamRecord {
    pub id: String,
    pub raw_text: String,
    pub q_line: Option<QCode>,
    pub location: Option<String>,
    pub fir: Option<String>,
    pub valid_from: Option<DateTime<Utc>>,
    pub valid_to: Option<ValidityEnd>,
    pub is_estimated_end: bool,
    pub schedule_text: Option<String>,
    pub body_text: String,
    pub line_count: usize,
    pub word_count: usize,
    pub char_count: usize,
}

impl NotamRecord {
    /// Validity period in fractional days, absent for open-ended or
    /// permanent records.
    pub fn validity_days(&self) -> Option<f64> {
        match (self.valid_from, self.valid_to) {
            (Some(from), Some(ValidityEnd::At(to))) => {
                Some((to - from).num_seconds() as f64 / 86_400.0)
            }
            _ => None,
        }
    }

    pub fn category(&self) -> QCategory {
        self.q_line
            .as_ref()
            .map(|q| q.category)
            .unwrap_or(QCategory::Unknown)
    }
}

static ITEM_MARKER: Lazy<Regex> = Lazy::new(|| Regex::new(r"(^|\s)([QABCDE])\)").unwrap());

/// Parse an ICAO 10-digit timestamp (YYMMDDHHMM, UTC) or an RFC 3339 string.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if s.len() == 10 && s.bytes().all(|b| b.is_ascii_digit()) {
        let yy: i32 = s[0..2].parse().ok()?;
        let month: u32 = s[2..4].parse().ok()?;
        let day: u32 = s[4..6].parse().ok()?;
        let hour: u32 = s[6..8].parse().ok()?;
        let minute: u32 = s[8..10].parse().ok()?;
        return Utc
            .with_ymd_and_hms(2000 + yy, month, day, hour, minute, 0)
            .single();
    }
    DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

/// Parse raw NOTAM text into a structured record.
///
/// Never fails on non-empty text: items that do not parse leave their
/// optionals absent, and `body_text` falls back to the whole text when no
/// `E)` item is present.
pub fn parse_notam(id: &str, text: &str) -> Result<NotamRecord, CorpusError> {
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyInput);
    }

    let mut items: BTreeMap<char, String> = BTreeMap::new();
    let markers: Vec<(usize, usize, char)> = ITEM_MARKER
        .captures_iter(text)
        .map(|c| {
            let m = c.get(2).unwrap();
            (m.start(), m.end() + 1, m.as_str().chars().next().unwrap())
        })
        .collect();
    for (i, &(_, content_start, letter)) in markers.iter().enumerate() {
        let content_end = markers
            .get(i + 1)
            .map(|&(start, _, _)| start)
            .unwrap_or(text.len());
        let content = text[content_start..content_end].trim().to_string();
        items.entry(letter).or_insert(content);
    }

    let mut fir = None;
    let mut q_line = None;
    if let Some(q) = items.get(&'Q') {
        let fields: Vec<&str> = q.split('/').map(str::trim).collect();
        if let Some(first) = fields.first() {
            if first.len() == 4 && first.chars().all(|c| c.is_ascii_alphabetic()) {
                fir = Some(first.to_ascii_uppercase());
            }
        }
        q_line = fields
            .iter()
            .skip(1)
            .find(|f| f.len() >= 2 && f.starts_with('Q'))
            .and_then(|f| decode_qcode(f).ok());
    }

    let location = items.get(&'A').and_then(|a| {
        a.split_whitespace()
            .next()
            .filter(|tok| tok.len() == 4 && tok.chars().all(|c| c.is_ascii_alphabetic()))
            .map(|tok| tok.to_ascii_uppercase())
    });

    let valid_from = items.get(&'B').and_then(|b| {
        b.split_whitespace().next().and_then(parse_timestamp)
    });

    let mut valid_to = None;
    let mut is_estimated_end = false;
    if let Some(c) = items.get(&'C') {
        let upper = c.to_ascii_uppercase();
        if upper.contains("PERM") {
            valid_to = Some(ValidityEnd::Permanent);
        } else {
            valid_to = upper
                .split_whitespace()
                .next()
                .and_then(parse_timestamp)
                .map(ValidityEnd::At);
            is_estimated_end = valid_to.is_some() && upper.ends_with("EST");
        }
    }
    // an end before the start is unparseable garbage, not a valid window
    if let (Some(from), Some(ValidityEnd::At(to))) = (valid_from, valid_to) {
        if to < from {
            valid_to = None;
            is_estimated_end = false;
        }
    }

    let schedule_text = items.get(&'D').cloned().filter(|s| !s.is_empty());
    let body_text = items
        .get(&'E')
        .cloned()
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| text.trim().to_string());

    Ok(NotamRecord {
        id: id.to_string(),
        raw_text: text.to_string(),
        q_line,
        location,
        fir,
        valid_from,
        valid_to,
        is_estimated_end,
        schedule_text,
        body_text,
        line_count: text.lines().count(),
        word_count: text.split_whitespace().count(),
        char_count: text.chars().count(),
    })
}

/// A corpus input line that failed to parse.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line_number: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadOutcome {
    pub records: Vec<NotamRecord>,
    pub rejects: Vec<RejectedLine>,
}

#[derive(Debug, Deserialize)]
struct CorpusLine {
    id: String,
    text: String,
    qcode: Option<String>,
    airport: Option<String>,
    fir: Option<String>,
    valid_from: Option<String>,
    valid_to: Option<String>,
}

/// Load a JSONL corpus (`{"id", "text", ...}` per line). Malformed lines go
/// into the rejects report instead of being dropped silently; optional keys
/// override the parsed values.
pub fn load_corpus(path: &Path) -> Result<LoadOutcome, CorpusError> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_number = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<CorpusLine, _> = serde_json::from_str(&line);
        match parsed {
            Ok(entry) => match parse_notam(&entry.id, &entry.text) {
                Ok(mut record) => {
                    apply_overrides(&mut record, &entry);
                    records.push(record);
                }
                Err(e) => rejects.push(RejectedLine {
                    line_number,
                    reason: e.to_string(),
                }),
            },
            Err(e) => rejects.push(RejectedLine {
                line_number,
                reason: format!("invalid JSON: {e}"),
            }),
        }
    }
    if records.is_empty() {
        return Err(CorpusError::CorpusEmpty);
    }
    Ok(LoadOutcome { records, rejects })
}

fn apply_overrides(record: &mut NotamRecord, entry: &CorpusLine) {
    if let Some(q) = &entry.qcode {
        if let Ok(decoded) = decode_qcode(q) {
            record.q_line = Some(decoded);
        }
    }
    if let Some(a) = &entry.airport {
        record.location = Some(a.to_ascii_uppercase());
    }
    if let Some(f) = &entry.fir {
        record.fir = Some(f.to_ascii_uppercase());
    }
    if let Some(from) = &entry.valid_from {
        if let Some(t) = parse_timestamp(from) {
            record.valid_from = Some(t);
        }
    }
    if let Some(to) = &entry.valid_to {
        let upper = to.to_ascii_uppercase();
        if upper == "PERMANENT" || upper == "PERM" {
            record.valid_to = Some(ValidityEnd::Permanent);
            record.is_estimated_end = false;
        } else if let Some(t) = parse_timestamp(to) {
            record.valid_to = Some(ValidityEnd::At(t));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValiditySummary {
    pub mean_days: f64,
    pub min_days: f64,
    pub max_days: f64,
    pub median_days: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub record_count: usize,
    pub category_counts: BTreeMap<String, usize>,
    /// Absent when no record has a bounded validity window (PERM records are
    /// excluded from validity aggregates).
    pub validity: Option<ValiditySummary>,
    pub mean_word_count: f64,
    pub mean_char_count: f64,
    pub mean_line_count: f64,
}

pub fn compute_stats(records: &[NotamRecord]) -> Result<CorpusStats, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::CorpusEmpty);
    }
    let n = records.len() as f64;

    let mut category_counts = BTreeMap::new();
    for record in records {
        *category_counts
            .entry(record.category().name().to_string())
            .or_insert(0) += 1;
    }

    let mut periods: Vec<f64> = records.iter().filter_map(|r| r.validity_days()).collect();
    periods.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let validity = if periods.is_empty() {
        None
    } else {
        let len = periods.len();
        let median = if len % 2 == 1 {
            periods[len / 2]
        } else {
            (periods[len / 2 - 1] + periods[len / 2]) / 2.0
        };
        Some(ValiditySummary {
            mean_days: periods.iter().sum::<f64>() / len as f64,
            min_days: periods[0],
            max_days: periods[len - 1],
            median_days: median,
        })
    };

    Ok(CorpusStats {
        record_count: records.len(),
        category_counts,
        validity,
        mean_word_count: records.iter().map(|r| r.word_count as f64).sum::<f64>() / n,
        mean_char_count: records.iter().map(|r| r.char_count as f64).sum::<f64>() / n,
        mean_line_count: records.iter().map(|r| r.line_count as f64).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_full_item_layout() {
        let record = parse_notam(
            "n1",
            "Q) ZBPE/QMRLC/IV/NBO/A/000/999\nA) ZBAA B) 2401010800 C) PERM\nE) RWY 18L CLSD",
        )
        .unwrap();
        let q = record.q_line.as_ref().unwrap();
        assert_eq!(q.subject_letter, 'M');
        assert_eq!(q.category, QCategory::MovementAreas);
        assert_eq!(record.fir.as_deref(), Some("ZBPE"));
        assert_eq!(record.location.as_deref(), Some("ZBAA"));
        assert_eq!(
            record.valid_from,
            Some(Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).unwrap())
        );
        assert_eq!(record.valid_to, Some(ValidityEnd::Permanent));
        assert!(!record.is_estimated_end);
        assert_eq!(record.body_text, "RWY 18L CLSD");
    }

    #[test]
    fn parse_body_only() {
        let record = parse_notam("n2", "E) SNOW ON TWY A").unwrap();
        assert!(record.q_line.is_none());
        assert_eq!(record.body_text, "SNOW ON TWY A");
    }

    #[test]
    fn parse_no_items_falls_back_to_full_text() {
        let record = parse_notam("n3", "GPS UNRELIABLE IN AREA").unwrap();
        assert_eq!(record.body_text, "GPS UNRELIABLE IN AREA");
        assert_eq!(record.word_count, 4);
    }

    #[test]
    fn parse_empty_is_an_error() {
        assert!(matches!(parse_notam("n4", "  "), Err(CorpusError::EmptyInput)));
    }

    #[test]
    fn parse_estimated_end() {
        let record =
            parse_notam("n5", "B) 2401010000 C) 2401050000 EST\nE) TWY B CLSD").unwrap();
        assert!(record.is_estimated_end);
        assert!(matches!(record.valid_to, Some(ValidityEnd::At(_))));
    }

    #[test]
    fn parse_end_before_start_dropped() {
        let record = parse_notam("n6", "B) 2401050000 C) 2401010000\nE) X").unwrap();
        assert!(record.valid_to.is_none());
        assert!(!record.is_estimated_end);
    }

    #[test]
    fn decode_known_and_unknown_subjects() {
        let r = decode_qcode("QRTCA").unwrap();
        assert_eq!(r.subject_letter, 'R');
        assert_eq!(r.category, QCategory::AirspaceRestrictions);
        let l = decode_qcode("QLRAS").unwrap();
        assert_eq!(l.category, QCategory::LightingFacilities);
        let x = decode_qcode("QXXXX").unwrap();
        assert_eq!(x.subject_letter, 'X');
        assert_eq!(x.category, QCategory::Unknown);
    }

    #[test]
    fn decode_rejects_malformed() {
        assert!(decode_qcode("Q").is_err());
        assert!(decode_qcode("RTCA").is_err());
        assert!(decode_qcode("").is_err());
    }

    #[test]
    fn stats_validity_mean_median() {
        let mk = |id: &str, days: u32| {
            parse_notam(
                id,
                &format!("B) 2401010000 C) 24010{}0000\nE) RWY CLSD", 1 + days),
            )
            .unwrap()
        };
        let records = vec![mk("a", 2), mk("b", 4)];
        let stats = compute_stats(&records).unwrap();
        let v = stats.validity.unwrap();
        assert!((v.mean_days - 3.0).abs() < 1e-12);
        assert!((v.median_days - 3.0).abs() < 1e-12);
    }

    #[test]
    fn stats_all_permanent_has_no_validity() {
        let records = vec![
            parse_notam("a", "C) PERM\nE) ONE TWO THREE").unwrap(),
            parse_notam("b", "C) PERM\nE) FOUR FIVE").unwrap(),
        ];
        let stats = compute_stats(&records).unwrap();
        assert!(stats.validity.is_none());
        assert_eq!(stats.record_count, 2);
    }

    #[test]
    fn stats_on_empty_fails() {
        assert!(matches!(compute_stats(&[]), Err(CorpusError::CorpusEmpty)));
    }

    #[test]
    fn record_roundtrips_through_json() {
        let record = parse_notam(
            "rt",
            "Q) ZBPE/QMRLC/IV\nA) ZBAA B) 2401010800 C) 2401020800\nD) DAILY 0800-1200\nE) RWY 18L CLSD",
        )
        .unwrap();
        let json = serde_json::to_string(&record).unwrap();
        let back: NotamRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(record, back);
    }
}
