//! Schema-driven extraction from full-text study documents: study
//! characteristics, arm design, participant statistics and trial results.

mod records;

use std::collections::{HashMap, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{estimate_tokens, extract_json, Attempt, Gateway, GatewayError, TaskKind};
use crate::registry::PublicationCitation;
use crate::text::{char_prefix, normalize_for_audit};

pub use records::*;

/// Document token cap.
pub const DEFAULT_MAX_DOCUMENT_TOKENS: usize = 30_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractionError {
    #[error("schema violation in `{field}`: {detail}")]
    SchemaViolation { field: String, detail: String },
    #[error("duplicate arm label {0:?}")]
    DuplicateArmLabel(String),
    #[error("unknown group id {0:?}")]
    UnknownGroupId(String),
    #[error("unit mismatch: requested {expected:?}, model reported {got:?}")]
    UnitMismatch { expected: String, got: String },
    #[error("unparseable model output: {0}")]
    UnparseableModelOutput(String),
    #[error("no text available for {0}")]
    NoTextAvailable(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Text handed to the extraction prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyDocument {
    pub citation_id: String,
    pub main_text: String,
    pub table_text: String,
    pub token_estimate: usize,
    pub truncated: bool,
}

impl StudyDocument {
    pub fn render(&self) -> String {
        render_parts(&self.main_text, &self.table_text)
    }
}

fn render_parts(main: &str, tables: &str) -> String {
    if tables.is_empty() {
        main.to_string()
    } else {
        format!("{main}\n\nTables:\n{tables}")
    }
}

/// Builds the prompt document: title, abstract, full text, then tables. When
/// over `max_tokens`, the full-text tail is cut; title, abstract and tables
/// always stay whole.
pub fn prepare_document(citation: &PublicationCitation, max_tokens: usize) -> Result<StudyDocument, ExtractionError> {
    let full = citation.full_text.as_deref().map(str::trim).unwrap_or_default();
    if full.is_empty() && citation.abstract_text.trim().is_empty() {
        return Err(ExtractionError::NoTextAvailable(citation.citation_id.clone()));
    }
    let head = format!("Title: {}\n\nAbstract: {}", citation.title.trim(), citation.abstract_text.trim());
    let tables = citation.table_text.as_deref().map(str::trim).unwrap_or_default().to_string();
    let join = |body: &str| if body.is_empty() { head.clone() } else { format!("{head}\n\n{body}") };

    let mut main_text = join(full);
    let mut truncated = false;
    let budget_chars = max_tokens.saturating_mul(4);
    if render_parts(&main_text, &tables).chars().count() > budget_chars {
        let fixed = render_parts(&join(""), &tables).chars().count() + 2;
        let keep = budget_chars.saturating_sub(fixed);
        let body = char_prefix(full, keep).trim_end();
        main_text = join(body);
        truncated = true;
        tracing::debug!(citation = %citation.citation_id, kept_chars = keep, "document truncated");
    }
    let token_estimate = estimate_tokens(&render_parts(&main_text, &tables)) as usize;
    Ok(StudyDocument { citation_id: citation.citation_id.clone(), main_text, table_text: tables, token_estimate, truncated })
}

/// A parsed record with the raw reply it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted<T> {
    pub record: T,
    pub raw_response: String,
    pub reprompted: bool,
}

fn unparseable(e: impl Into<String>) -> ExtractionError {
    ExtractionError::UnparseableModelOutput(e.into())
}

fn render_fields(fields: &[FieldSpec]) -> String {
    fields
        .iter()
        .map(|f| {
            let kind = match f.value_kind {
                ValueKind::Text => "text",
                ValueKind::Number => "number",
                ValueKind::ListOfText => "list of text",
            };
            format!("- {} ({kind}): {}", f.name, f.description)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_characteristics(text: &str, fields: &[FieldSpec], allow_missing: bool) -> Attempt<StudyCharacteristics, ExtractionError> {
    let value = match extract_json(text) {
        Ok(Value::Object(map)) => map,
        Ok(_) => return Attempt::Retry(unparseable("expected a JSON object keyed by field name")),
        Err(e) => return Attempt::Retry(unparseable(e)),
    };
    let mut out = StudyCharacteristics::default();
    let mut missing = Vec::new();
    for spec in fields {
        match value.get(&spec.name) {
            Some(v) => match spec.coerce(v) {
                Ok(fv) => {
                    out.fields.insert(spec.name.clone(), fv);
                }
                Err(e) => return Attempt::Fail(e),
            },
            None => {
                missing.push(spec.name.clone());
                out.fields.insert(spec.name.clone(), FieldValue::NotReported);
            }
        }
    }
    if !missing.is_empty() && !allow_missing {
        return Attempt::Retry(unparseable(format!("missing fields: {}", missing.join(", "))));
    }
    Attempt::Done(out)
}

/// Extracts the requested fields. A field the model leaves out is asked for
/// once more, then recorded as NOT_REPORTED.
pub async fn extract_study_characteristics(
    doc: &StudyDocument,
    fields: &[FieldSpec],
    gateway: &Gateway,
    subject: &str,
) -> Result<Extracted<StudyCharacteristics>, ExtractionError> {
    if fields.is_empty() {
        return Err(ExtractionError::InvalidInput("no fields requested".into()));
    }
    let mut names = HashSet::new();
    if let Some(dup) = fields.iter().find(|f| !names.insert(f.name.as_str())) {
        return Err(ExtractionError::InvalidInput(format!("duplicate field {}", dup.name)));
    }
    let request = gateway
        .request(
            TaskKind::CharExtract,
            &[("fields", &render_fields(fields)), ("citation_id", &doc.citation_id), ("document", &doc.render())],
        )?
        .with_tag(TaskKind::CharExtract, subject.to_string());
    let mut attempt = 0;
    let parsed = gateway
        .complete_with_reprompt(&request, TaskKind::CharExtract, |text| {
            attempt += 1;
            parse_characteristics(text, fields, attempt > 1)
        })
        .await?;
    Ok(Extracted { record: parsed.value, raw_response: parsed.raw, reprompted: parsed.reprompted })
}

fn parse_arms(text: &str) -> Attempt<ArmDesign, ExtractionError> {
    let value = match extract_json(text) {
        Ok(v) => v,
        Err(e) => return Attempt::Retry(unparseable(e)),
    };
    let items = match value.get("arms").or(if value.is_array() { Some(&value) } else { None }) {
        Some(Value::Array(items)) if !items.is_empty() => items.clone(),
        _ => return Attempt::Retry(unparseable("expected a non-empty `arms` array")),
    };
    let design: ArmDesign = match serde_json::from_value(Value::Object(
        [("arms".to_string(), Value::Array(items))].into_iter().collect(),
    )) {
        Ok(d) => d,
        Err(e) => return Attempt::Retry(unparseable(format!("arm objects: {e}"))),
    };
    match design.validate() {
        Ok(()) => Attempt::Done(design),
        Err(e) => Attempt::Fail(e),
    }
}

pub async fn extract_arm_design(doc: &StudyDocument, gateway: &Gateway, subject: &str) -> Result<Extracted<ArmDesign>, ExtractionError> {
    let request = gateway
        .request(TaskKind::ArmExtract, &[("citation_id", &doc.citation_id), ("document", &doc.render())])?
        .with_tag(TaskKind::ArmExtract, subject.to_string());
    let parsed = gateway.complete_with_reprompt(&request, TaskKind::ArmExtract, parse_arms).await?;
    Ok(Extracted { record: parsed.value, raw_response: parsed.raw, reprompted: parsed.reprompted })
}

/// What to extract for one participant statistic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasureSpec {
    pub measure_definition: String,
    pub parameter_type: String,
    pub unit: String,
    pub groups: Vec<MeasureGroup>,
}

fn render_groups(groups: &[MeasureGroup]) -> String {
    groups
        .iter()
        .map(|g| {
            let mut line = format!("- {}: {}", g.group_id, g.definition);
            if !g.value.is_empty() {
                line.push_str(format!(" (n = {} {})", g.value, g.unit).trim_end());
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

const UNREPORTED_NOTE: &str = "not reported by the model";

fn parse_measure(text: &str, spec: &MeasureSpec) -> Attempt<ParticipantMeasure, ExtractionError> {
    let value = match extract_json(text) {
        Ok(v) => v,
        Err(e) => return Attempt::Retry(unparseable(e)),
    };
    let Some(items) = value.get("results").and_then(Value::as_array) else {
        return Attempt::Retry(unparseable("missing `results` array"));
    };
    let known: HashSet<&str> = spec.groups.iter().map(|g| g.group_id.as_str()).collect();
    let mut by_group: HashMap<String, MeasureResult> = HashMap::new();
    for item in items {
        let Some(gid) = item.get("group_id").and_then(Value::as_str).map(str::trim) else {
            return Attempt::Retry(unparseable("result without group_id"));
        };
        if !known.contains(gid) {
            return Attempt::Fail(ExtractionError::UnknownGroupId(gid.to_string()));
        }
        let result = MeasureResult {
            group_id: gid.to_string(),
            value: FieldValue::from_json_loose(item.get("value").unwrap_or(&Value::Null)),
            notes: item.get("notes").and_then(Value::as_str).unwrap_or_default().trim().to_string(),
        };
        if by_group.insert(gid.to_string(), result).is_some() {
            return Attempt::Retry(unparseable(format!("group {gid} reported twice")));
        }
    }
    let results = spec
        .groups
        .iter()
        .map(|g| {
            by_group.remove(&g.group_id).unwrap_or_else(|| MeasureResult {
                group_id: g.group_id.clone(),
                value: FieldValue::NotReported,
                notes: UNREPORTED_NOTE.into(),
            })
        })
        .collect();
    let measure = ParticipantMeasure {
        measure_definition: spec.measure_definition.clone(),
        parameter_type: spec.parameter_type.clone(),
        unit: spec.unit.clone(),
        groups: spec.groups.clone(),
        results,
    };
    match measure.validate() {
        Ok(()) => Attempt::Done(measure),
        Err(e) => Attempt::Fail(e),
    }
}

/// One result per requested group; groups the model does not report carry
/// NOT_REPORTED with a note.
pub async fn extract_participant_statistics(
    doc: &StudyDocument,
    spec: &MeasureSpec,
    gateway: &Gateway,
    subject: &str,
) -> Result<Extracted<ParticipantMeasure>, ExtractionError> {
    if spec.groups.is_empty() {
        return Err(ExtractionError::InvalidInput("no groups".into()));
    }
    let mut ids = HashSet::new();
    if let Some(dup) = spec.groups.iter().find(|g| !ids.insert(g.group_id.as_str())) {
        return Err(ExtractionError::InvalidInput(format!("duplicate group id {}", dup.group_id)));
    }
    let request = gateway
        .request(
            TaskKind::ParticipantExtract,
            &[
                ("measure_definition", &spec.measure_definition),
                ("parameter_type", &spec.parameter_type),
                ("unit", &spec.unit),
                ("groups", &render_groups(&spec.groups)),
                ("citation_id", &doc.citation_id),
                ("document", &doc.render()),
            ],
        )?
        .with_tag(TaskKind::ParticipantExtract, subject.to_string());
    let parsed = gateway
        .complete_with_reprompt(&request, TaskKind::ParticipantExtract, |t| parse_measure(t, spec))
        .await?;
    Ok(Extracted { record: parsed.value, raw_response: parsed.raw, reprompted: parsed.reprompted })
}

/// Input side of a trial-result extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub outcome_definition: String,
    pub group_definition: String,
    pub parameter_type: String,
    pub unit: String,
    #[serde(default)]
    pub timeframe: String,
    #[serde(default)]
    pub denominator_unit: String,
    #[serde(default)]
    pub denominator_value: Option<f64>,
}

impl OutcomeSpec {
    pub fn from_result(r: &OutcomeResult) -> Self {
        Self {
            outcome_definition: r.outcome_definition.clone(),
            group_definition: r.group_definition.clone(),
            parameter_type: r.parameter_type.clone(),
            unit: r.unit.clone(),
            timeframe: r.timeframe.clone(),
            denominator_unit: r.denominator_unit.clone(),
            denominator_value: r.denominator_value,
        }
    }
}

/// Case, plural and `%` spelling differences do not count as different units.
pub fn canonical_unit(unit: &str) -> String {
    let lower = unit.trim().to_lowercase().replace('%', " percent ");
    lower
        .split(|c: char| !c.is_alphanumeric() && c != '/')
        .filter(|w| !w.is_empty())
        .map(|w| match w {
            "percentage" | "pct" => "percent".to_string(),
            w if w.len() > 3 && w.ends_with('s') && !w.ends_with("ss") => w[..w.len() - 1].to_string(),
            w => w.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_outcome(text: &str, spec: &OutcomeSpec) -> Attempt<OutcomeResult, ExtractionError> {
    let value = match extract_json(text) {
        Ok(v) => v,
        Err(e) => return Attempt::Retry(unparseable(e)),
    };
    if let Some(unit) = value.get("unit").and_then(Value::as_str).map(str::trim).filter(|u| !u.is_empty()) {
        if canonical_unit(unit) != canonical_unit(&spec.unit) {
            return Attempt::Fail(ExtractionError::UnitMismatch { expected: spec.unit.clone(), got: unit.to_string() });
        }
    }
    let items = match value.get("results").and_then(Value::as_array) {
        Some(items) if !items.is_empty() => items,
        _ => return Attempt::Retry(unparseable("expected a non-empty `results` array")),
    };
    let mut results = Vec::with_capacity(items.len());
    for item in items {
        let Some(v) = item.get("value") else {
            return Attempt::Retry(unparseable("result without value"));
        };
        results.push(OutcomeValue {
            value: FieldValue::from_json_loose(v),
            title: item.get("title").and_then(Value::as_str).unwrap_or_default().trim().to_string(),
        });
    }
    let record = OutcomeResult {
        outcome_definition: spec.outcome_definition.clone(),
        group_definition: spec.group_definition.clone(),
        parameter_type: spec.parameter_type.clone(),
        unit: spec.unit.clone(),
        timeframe: spec.timeframe.clone(),
        denominator_unit: spec.denominator_unit.clone(),
        denominator_value: spec.denominator_value,
        results,
    };
    match record.validate() {
        Ok(()) => Attempt::Done(record),
        Err(e) => Attempt::Fail(e),
    }
}

/// Result values for one outcome and group. Values carry the requested unit;
/// a conflicting unit stated by the model is an error.
pub async fn extract_trial_results(
    doc: &StudyDocument,
    spec: &OutcomeSpec,
    gateway: &Gateway,
    subject: &str,
) -> Result<Extracted<OutcomeResult>, ExtractionError> {
    if spec.outcome_definition.trim().is_empty() || spec.group_definition.trim().is_empty() {
        return Err(ExtractionError::InvalidInput("outcome and group definitions are required".into()));
    }
    let denominator = spec.denominator_value.map(format_number).unwrap_or_else(|| NOT_REPORTED.to_string());
    let request = gateway
        .request(
            TaskKind::ResultExtract,
            &[
                ("outcome_definition", &spec.outcome_definition),
                ("group_definition", &spec.group_definition),
                ("parameter_type", &spec.parameter_type),
                ("unit", &spec.unit),
                ("timeframe", &spec.timeframe),
                ("denominator_value", &denominator),
                ("denominator_unit", &spec.denominator_unit),
                ("citation_id", &doc.citation_id),
                ("document", &doc.render()),
            ],
        )?
        .with_tag(TaskKind::ResultExtract, subject.to_string());
    let parsed = gateway
        .complete_with_reprompt(&request, TaskKind::ResultExtract, |t| parse_outcome(t, spec))
        .await?;
    Ok(Extracted { record: parsed.value, raw_response: parsed.raw, reprompted: parsed.reprompted })
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?").unwrap());

/// Checks that every reported output value occurs in the raw reply. Text is
/// compared as a normalized substring, numbers by value. Returns the paths
/// of values that do not.
pub fn audit_no_fabrication(record: &ExtractionRecord, raw_response: &str) -> Result<(), Vec<String>> {
    let haystack = normalize_for_audit(raw_response);
    let numbers: Vec<f64> = NUMBER.find_iter(&haystack).filter_map(|m| m.as_str().parse().ok()).collect();
    let text_ok = |s: &str| {
        let needle = normalize_for_audit(s);
        needle.is_empty() || haystack.contains(&needle) || haystack.contains(&normalize_for_audit(&serde_json::to_string(s).unwrap_or_default()).trim_matches('"').to_string())
    };
    let mut bad = Vec::new();
    for (path, value, _) in record.output_fields() {
        let ok = match &value {
            FieldValue::NotReported => true,
            FieldValue::Number(x) => numbers.iter().any(|n| n == x),
            FieldValue::Text(s) => text_ok(s),
            FieldValue::TextList(items) => items.iter().all(|s| text_ok(s)),
        };
        if !ok {
            bad.push(path);
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad)
    }
}
