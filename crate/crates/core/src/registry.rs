//! Trial-registry and drug-tracker record parsing, validation, and
//! normalization.
//!
//! Inputs are line-delimited JSON, one record per line (schemas in
//! `docs/FORMATS.md`). Parsing is total: malformed lines become
//! [`ParseError`]s and never abort the stream.

use std::collections::BTreeSet;
use std::fmt;
use std::io::BufRead;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of protocol attributes in a trial description.
pub const ATTRIBUTE_COUNT: usize = 11;

/// Attribute names in canonical order. Every concatenation (descriptions,
/// embeddings, drop-feature reports) uses this order.
pub const ATTRIBUTE_NAMES: [&str; ATTRIBUTE_COUNT] = [
    "name",
    "brief",
    "drug_used",
    "drug_class",
    "indication",
    "target",
    "therapy",
    "lead_sponsor",
    "criteria",
    "primary_outcome",
    "secondary_outcome",
];

/// Regulatory phase, totally ordered by progression.
///
/// `Approved` is valid only as the ultimate phase of a
/// [`DrugProgressRecord`]; trial records carrying it are rejected at parse
/// time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    PhaseI,
    PhaseII,
    PhaseIII,
    Approved,
}

impl Phase {
    /// The three phases a trial itself can be in.
    pub const TRIAL_PHASES: [Phase; 3] = [Phase::PhaseI, Phase::PhaseII, Phase::PhaseIII];

    /// All values, including `Approved`.
    pub const ALL: [Phase; 4] = [
        Phase::PhaseI,
        Phase::PhaseII,
        Phase::PhaseIII,
        Phase::Approved,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::PhaseI => "Phase I",
            Phase::PhaseII => "Phase II",
            Phase::PhaseIII => "Phase III",
            Phase::Approved => "Approved",
        }
    }

    /// Lenient, case-insensitive parse. Combined registry values such as
    /// `"Phase 1/Phase 2"` map to the later phase.
    pub fn parse(input: &str) -> Option<Phase> {
        let trimmed = input.trim();
        if trimmed.is_empty() {
            return None;
        }
        if trimmed.contains('/') {
            return trimmed.split('/').filter_map(Phase::parse).max();
        }
        let lowered = trimmed.to_ascii_lowercase();
        let tail = lowered.strip_prefix("phase").unwrap_or(&lowered).trim();
        match tail {
            "i" | "1" => Some(Phase::PhaseI),
            "ii" | "2" => Some(Phase::PhaseII),
            "iii" | "3" => Some(Phase::PhaseIII),
            "approved" | "approval" => Some(Phase::Approved),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Phase {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Phase {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Phase::parse(&raw)
            .ok_or_else(|| serde::de::Error::custom(format!("unrecognized phase {raw:?}")))
    }
}

/// Registry recruitment status. Unrecognized values are preserved verbatim
/// in `Other`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecruitmentStatus {
    Completed,
    Terminated,
    Other(String),
}

impl RecruitmentStatus {
    pub fn parse(input: &str) -> RecruitmentStatus {
        match input.trim().to_ascii_lowercase().as_str() {
            "completed" => RecruitmentStatus::Completed,
            "terminated" => RecruitmentStatus::Terminated,
            _ => RecruitmentStatus::Other(input.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            RecruitmentStatus::Completed => "Completed",
            RecruitmentStatus::Terminated => "Terminated",
            RecruitmentStatus::Other(text) => text,
        }
    }
}

impl Default for RecruitmentStatus {
    fn default() -> Self {
        RecruitmentStatus::Other(String::new())
    }
}

impl Serialize for RecruitmentStatus {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RecruitmentStatus {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(RecruitmentStatus::parse(&String::deserialize(
            deserializer,
        )?))
    }
}

/// Drug classification. Unrecognized or absent classes map to `Unknown`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum DrugClass {
    Biologic,
    Biosimilar,
    Nme,
    NonNme,
    Vaccine,
    #[default]
    Unknown,
}

impl DrugClass {
    pub const ALL: [DrugClass; 6] = [
        DrugClass::Biologic,
        DrugClass::Biosimilar,
        DrugClass::Nme,
        DrugClass::NonNme,
        DrugClass::Vaccine,
        DrugClass::Unknown,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DrugClass::Biologic => "Biologic",
            DrugClass::Biosimilar => "Biosimilar",
            DrugClass::Nme => "New Molecular Entity (NME)",
            DrugClass::NonNme => "Non-New Molecular Entity (Non-NME)",
            DrugClass::Vaccine => "Vaccine",
            DrugClass::Unknown => "Unknown",
        }
    }

    pub fn parse(input: &str) -> DrugClass {
        match input.trim().to_ascii_lowercase().as_str() {
            "biologic" | "biologics" => DrugClass::Biologic,
            "biosimilar" | "biosimilars" => DrugClass::Biosimilar,
            "nme" | "new molecular entity" | "new molecular entity (nme)" => DrugClass::Nme,
            "non-nme"
            | "nonnme"
            | "non-new molecular entity"
            | "non-new molecular entity (non-nme)" => DrugClass::NonNme,
            "vaccine" | "vaccines" => DrugClass::Vaccine,
            _ => DrugClass::Unknown,
        }
    }
}

impl fmt::Display for DrugClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for DrugClass {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for DrugClass {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(DrugClass::parse(&String::deserialize(deserializer)?))
    }
}

/// The eleven protocol attributes, in canonical order. Missing text fields
/// are stored as empty strings, never as absent values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeSet {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub brief: String,
    #[serde(default)]
    pub drug_used: String,
    #[serde(default)]
    pub drug_class: DrugClass,
    #[serde(default)]
    pub indication: String,
    #[serde(default)]
    pub target: String,
    #[serde(default)]
    pub therapy: String,
    #[serde(default)]
    pub lead_sponsor: String,
    #[serde(default)]
    pub criteria: String,
    #[serde(default)]
    pub primary_outcome: String,
    #[serde(default)]
    pub secondary_outcome: String,
}

impl AttributeSet {
    /// Attribute texts in canonical order. The drug class contributes its
    /// display form.
    pub fn texts(&self) -> [String; ATTRIBUTE_COUNT] {
        [
            self.name.clone(),
            self.brief.clone(),
            self.drug_used.clone(),
            self.drug_class.to_string(),
            self.indication.clone(),
            self.target.clone(),
            self.therapy.clone(),
            self.lead_sponsor.clone(),
            self.criteria.clone(),
            self.primary_outcome.clone(),
            self.secondary_outcome.clone(),
        ]
    }
}

/// One registry entry: identifiers, phase, status, modification date, and
/// the protocol attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    #[serde(default)]
    pub nct_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drug_indication_id: Option<String>,
    pub phase: Phase,
    #[serde(default)]
    pub status: RecruitmentStatus,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "deserialize_opt_date"
    )]
    pub last_modified: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination_reason: Option<String>,
    #[serde(flatten)]
    pub attributes: AttributeSet,
}

/// Drug-tracker entry tying one drug-indication pair to its trials and the
/// furthest phase it reached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugProgressRecord {
    pub drug_indication_id: String,
    pub nct_ids: BTreeSet<String>,
    pub ultimate_phase: Phase,
}

/// Parse ISO-8601 calendar dates; a trailing time-of-day is accepted and
/// discarded.
pub fn parse_iso_date(input: &str) -> Result<NaiveDate, String> {
    let trimmed = input.trim();
    if let Ok(date) = trimmed.parse::<NaiveDate>() {
        return Ok(date);
    }
    if let Some((date_part, _)) = trimmed.split_once('T') {
        if let Ok(date) = date_part.parse::<NaiveDate>() {
            return Ok(date);
        }
    }
    Err(format!("invalid ISO-8601 date {trimmed:?}"))
}

fn deserialize_opt_date<'de, D: Deserializer<'de>>(
    deserializer: D,
) -> Result<Option<NaiveDate>, D::Error> {
    let raw: Option<String> = Option::deserialize(deserializer)?;
    match raw {
        None => Ok(None),
        Some(s) if s.trim().is_empty() => Ok(None),
        Some(s) => parse_iso_date(&s)
            .map(Some)
            .map_err(serde::de::Error::custom),
    }
}

/// Non-fatal problem encountered while parsing a record stream.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("duplicate id {id:?} (first extra occurrence at line {line})")]
    DuplicateId { line: usize, id: String },
}

/// Parse a line-delimited trial-record stream.
///
/// Every well-formed line yields one [`TrialRecord`]; malformed lines are
/// reported and skipped. Duplicate NCT-IDs keep the occurrence with the
/// latest `last_modified` and are reported once per id.
pub fn parse_trial_records<R: BufRead>(input: R) -> (Vec<TrialRecord>, Vec<ParseError>) {
    let mut records: Vec<TrialRecord> = Vec::new();
    let mut errors = Vec::new();
    let mut index_by_id: std::collections::HashMap<String, usize> =
        std::collections::HashMap::new();
    let mut reported_duplicates: BTreeSet<String> = BTreeSet::new();

    for_each_json_line(input, &mut errors, |line_no, value, errors| {
        let record: TrialRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                errors.push(ParseError::Syntax {
                    line: line_no,
                    reason: e.to_string(),
                });
                return;
            }
        };
        if record.phase == Phase::Approved {
            errors.push(ParseError::Syntax {
                line: line_no,
                reason: "\"Approved\" is not a valid trial phase".to_string(),
            });
            return;
        }
        if record.nct_id.is_empty() {
            records.push(record);
            return;
        }
        match index_by_id.get(&record.nct_id) {
            Some(&at) => {
                if reported_duplicates.insert(record.nct_id.clone()) {
                    errors.push(ParseError::DuplicateId {
                        line: line_no,
                        id: record.nct_id.clone(),
                    });
                }
                // Registry entries are updated in place: keep the latest.
                if record.last_modified > records[at].last_modified {
                    records[at] = record;
                }
            }
            None => {
                index_by_id.insert(record.nct_id.clone(), records.len());
                records.push(record);
            }
        }
    });
    (records, errors)
}

/// Parse a line-delimited drug-tracker stream.
pub fn parse_drug_tracker<R: BufRead>(input: R) -> (Vec<DrugProgressRecord>, Vec<ParseError>) {
    let mut records: Vec<DrugProgressRecord> = Vec::new();
    let mut errors = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut reported: BTreeSet<String> = BTreeSet::new();

    for_each_json_line(input, &mut errors, |line_no, value, errors| {
        let record: DrugProgressRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                errors.push(ParseError::Syntax {
                    line: line_no,
                    reason: e.to_string(),
                });
                return;
            }
        };
        if record.drug_indication_id.is_empty() {
            errors.push(ParseError::Syntax {
                line: line_no,
                reason: "empty drug_indication_id".to_string(),
            });
            return;
        }
        if record.nct_ids.is_empty() {
            errors.push(ParseError::Syntax {
                line: line_no,
                reason: "empty nct_ids".to_string(),
            });
            return;
        }
        if !seen.insert(record.drug_indication_id.clone()) {
            if reported.insert(record.drug_indication_id.clone()) {
                errors.push(ParseError::DuplicateId {
                    line: line_no,
                    id: record.drug_indication_id.clone(),
                });
            }
            return;
        }
        records.push(record);
    });
    (records, errors)
}

/// Drive a closure over the JSON value of each non-empty line. Metadata
/// lines (`{"_meta": ...}`) are skipped; undecodable bytes or JSON become
/// errors. Never panics, never aborts the stream.
fn for_each_json_line<R: BufRead>(
    mut input: R,
    errors: &mut Vec<ParseError>,
    mut handle: impl FnMut(usize, serde_json::Value, &mut Vec<ParseError>),
) {
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        line_no += 1;
        match input.read_until(b'\n', &mut buf) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) => {
                errors.push(ParseError::Syntax {
                    line: line_no,
                    reason: format!("read failed: {e}"),
                });
                break;
            }
        }
        let text = match std::str::from_utf8(&buf) {
            Ok(t) => t.trim(),
            Err(_) => {
                errors.push(ParseError::Syntax {
                    line: line_no,
                    reason: "invalid UTF-8".to_string(),
                });
                continue;
            }
        };
        if text.is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => {
                errors.push(ParseError::Syntax {
                    line: line_no,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if value.as_object().is_some_and(|o| o.contains_key("_meta")) {
            continue;
        }
        handle(line_no, value, errors);
    }
}

/// Per-record quality classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordQuality {
    Usable,
    LowQuality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IssueKind {
    Missing,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub field: String,
    pub kind: IssueKind,
    pub message: String,
}

/// Validation outcome for one record. `LowQuality` exactly when a required
/// field (nct_id, phase, status, last_modified, name, brief, criteria) is
/// missing or empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub record_id: String,
    pub issues: Vec<ValidationIssue>,
    pub quality: RecordQuality,
}

/// Validate one trial record. Reports, never fails.
pub fn validate_record(record: &TrialRecord) -> ValidationReport {
    fn flag_empty(issues: &mut Vec<ValidationIssue>, field: &str, value: &str) {
        if value.trim().is_empty() {
            issues.push(ValidationIssue {
                field: field.to_string(),
                kind: IssueKind::Empty,
                message: format!("required field {field} is empty"),
            });
        }
    }
    let mut issues = Vec::new();
    flag_empty(&mut issues, "nct_id", &record.nct_id);
    // Phase is structurally present; status counts as empty when it carries
    // no text at all.
    if let RecruitmentStatus::Other(text) = &record.status {
        flag_empty(&mut issues, "status", text);
    }
    flag_empty(&mut issues, "name", &record.attributes.name);
    flag_empty(&mut issues, "brief", &record.attributes.brief);
    flag_empty(&mut issues, "criteria", &record.attributes.criteria);
    if record.last_modified.is_none() {
        issues.push(ValidationIssue {
            field: "last_modified".to_string(),
            kind: IssueKind::Missing,
            message: "required field last_modified is missing".to_string(),
        });
    }
    let quality = if issues.is_empty() {
        RecordQuality::Usable
    } else {
        RecordQuality::LowQuality
    };
    ValidationReport {
        record_id: record.nct_id.clone(),
        issues,
        quality,
    }
}
