use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ExtractionError;

/// Marker for information the source does not report.
pub const NOT_REPORTED: &str = "NOT_REPORTED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Text,
    Number,
    ListOfText,
}

/// A field the caller wants extracted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub value_kind: ValueKind,
    #[serde(default)]
    pub description: String,
}

impl FieldSpec {
    pub fn new(name: &str, value_kind: ValueKind, description: &str) -> Self {
        Self { name: name.into(), value_kind, description: description.into() }
    }

    /// Interprets a JSON value as this field's kind. `null` and the
    /// [`NOT_REPORTED`] marker map to [`FieldValue::NotReported`].
    pub fn coerce(&self, value: &Value) -> Result<FieldValue, ExtractionError> {
        let violation = |detail: String| ExtractionError::SchemaViolation { field: self.name.clone(), detail };
        if value.is_null() || is_not_reported_value(value) {
            return Ok(FieldValue::NotReported);
        }
        match self.value_kind {
            ValueKind::Number => match value {
                Value::Number(n) => n
                    .as_f64()
                    .filter(|x| x.is_finite())
                    .map(FieldValue::Number)
                    .ok_or_else(|| violation(format!("{n} is not a finite number"))),
                Value::String(s) => parse_number(s)
                    .map(FieldValue::Number)
                    .ok_or_else(|| violation(format!("{s:?} is not a number"))),
                other => Err(violation(format!("expected a number, got {other}"))),
            },
            ValueKind::Text => match value {
                Value::String(s) if !s.trim().is_empty() => Ok(FieldValue::Text(s.trim().to_string())),
                Value::String(_) => Ok(FieldValue::NotReported),
                other => Err(violation(format!("expected text, got {other}"))),
            },
            ValueKind::ListOfText => match value {
                Value::Array(items) => {
                    let mut out = Vec::with_capacity(items.len());
                    for item in items {
                        match item {
                            Value::String(s) if !s.trim().is_empty() => out.push(s.trim().to_string()),
                            Value::String(_) => {}
                            other => return Err(violation(format!("list item {other} is not text"))),
                        }
                    }
                    if out.is_empty() {
                        Ok(FieldValue::NotReported)
                    } else {
                        Ok(FieldValue::TextList(out))
                    }
                }
                Value::String(s) if !s.trim().is_empty() => Ok(FieldValue::TextList(vec![s.trim().to_string()])),
                other => Err(violation(format!("expected a list of text, got {other}"))),
            },
        }
    }
}

fn is_not_reported_value(value: &Value) -> bool {
    value.as_str().is_some_and(is_not_reported_text)
}

pub(crate) fn is_not_reported_text(s: &str) -> bool {
    let s = s.trim();
    s == NOT_REPORTED || s.eq_ignore_ascii_case("not reported") || s.eq_ignore_ascii_case("not_reported")
}

/// Default study-characteristic fields.
pub fn default_characteristic_fields() -> Vec<FieldSpec> {
    vec![
        FieldSpec::new("conditions", ValueKind::ListOfText, "Conditions or diseases studied"),
        FieldSpec::new("interventions", ValueKind::ListOfText, "Names of the interventions studied"),
        FieldSpec::new("enrollment", ValueKind::Number, "Number of participants enrolled"),
        FieldSpec::new("study_type", ValueKind::Text, "Study type, e.g. interventional or observational"),
    ]
}

/// Parses a number written by a person or a model: thousands separators,
/// unicode minus and a leading plus are accepted. Words are not.
pub fn parse_number(text: &str) -> Option<f64> {
    let s = text.trim().replace(['\u{2212}', '\u{2013}'], "-");
    let s = s.strip_prefix('+').unwrap_or(&s);
    if s.is_empty() || !s.bytes().any(|b| b.is_ascii_digit()) {
        return None;
    }
    let cleaned = if s.contains(',') {
        let (int, frac) = match s.split_once('.') {
            Some((i, f)) => (i, Some(f)),
            None => (s, None),
        };
        let digits = int.strip_prefix('-').unwrap_or(int);
        let groups: Vec<&str> = digits.split(',').collect();
        let well_grouped = !groups[0].is_empty()
            && groups[0].len() <= 3
            && groups[1..].iter().all(|g| g.len() == 3);
        if !well_grouped {
            return None;
        }
        let mut c = int.replace(',', "");
        if let Some(f) = frac {
            c.push('.');
            c.push_str(f);
        }
        c
    } else {
        s.to_string()
    };
    if !cleaned.bytes().all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'e' | b'E' | b'+')) {
        return None;
    }
    cleaned.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// An extracted value. Serialized as a JSON number, string, array of
/// strings, or the `"NOT_REPORTED"` marker.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Text(String),
    Number(f64),
    TextList(Vec<String>),
    NotReported,
}

impl FieldValue {
    pub fn is_reported(&self) -> bool {
        !matches!(self, FieldValue::NotReported)
    }

    pub fn kind(&self) -> Option<ValueKind> {
        match self {
            FieldValue::Text(_) => Some(ValueKind::Text),
            FieldValue::Number(_) => Some(ValueKind::Number),
            FieldValue::TextList(_) => Some(ValueKind::ListOfText),
            FieldValue::NotReported => None,
        }
    }

    /// Number or numeric text, for result values that may be either.
    pub fn from_json_loose(value: &Value) -> FieldValue {
        match value {
            Value::Null => FieldValue::NotReported,
            Value::Number(n) => n.as_f64().filter(|x| x.is_finite()).map(FieldValue::Number).unwrap_or(FieldValue::NotReported),
            Value::String(s) if is_not_reported_text(s) || s.trim().is_empty() => FieldValue::NotReported,
            Value::String(s) => parse_number(s).map(FieldValue::Number).unwrap_or_else(|| FieldValue::Text(s.trim().to_string())),
            Value::Array(items) => FieldValue::TextList(
                items.iter().map(|v| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string())).collect(),
            ),
            Value::Bool(b) => FieldValue::Text(b.to_string()),
            Value::Object(_) => FieldValue::Text(value.to_string()),
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("field values always serialize")
    }
}

/// Shortest decimal text for a number; integral values have no fraction.
pub fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Text(s) => f.write_str(s),
            FieldValue::Number(x) => f.write_str(&format_number(*x)),
            FieldValue::TextList(items) => f.write_str(&items.join("; ")),
            FieldValue::NotReported => f.write_str(NOT_REPORTED),
        }
    }
}

impl Serialize for FieldValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            FieldValue::Text(s) => serializer.serialize_str(s),
            FieldValue::Number(x) if x.fract() == 0.0 && x.abs() < 1e15 => serializer.serialize_i64(*x as i64),
            FieldValue::Number(x) => serializer.serialize_f64(*x),
            FieldValue::TextList(items) => items.serialize(serializer),
            FieldValue::NotReported => serializer.serialize_str(NOT_REPORTED),
        }
    }
}

impl<'de> Deserialize<'de> for FieldValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        match &value {
            Value::Null => Ok(FieldValue::NotReported),
            Value::String(s) if s == NOT_REPORTED => Ok(FieldValue::NotReported),
            Value::String(s) => Ok(FieldValue::Text(s.clone())),
            Value::Number(n) => n
                .as_f64()
                .filter(|x| x.is_finite())
                .map(FieldValue::Number)
                .ok_or_else(|| de::Error::custom("non-finite number")),
            Value::Array(items) => items
                .iter()
                .map(|v| v.as_str().map(str::to_string).ok_or_else(|| de::Error::custom("list items must be strings")))
                .collect::<Result<_, _>>()
                .map(FieldValue::TextList),
            other => Err(de::Error::custom(format!("unsupported field value {other}"))),
        }
    }
}

/// Study characteristics keyed by field name, in request order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StudyCharacteristics {
    pub fields: IndexMap<String, FieldValue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub arm_type: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub intervention_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArmDesign {
    pub arms: Vec<Arm>,
}

impl ArmDesign {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.arms.is_empty() {
            return Err(ExtractionError::SchemaViolation { field: "arms".into(), detail: "no arms".into() });
        }
        let mut seen = HashSet::new();
        for arm in &self.arms {
            if arm.label.trim().is_empty() {
                return Err(ExtractionError::SchemaViolation { field: "label".into(), detail: "empty arm label".into() });
            }
            if arm.arm_type.trim().is_empty() {
                return Err(ExtractionError::SchemaViolation {
                    field: "arm_type".into(),
                    detail: format!("arm {:?} has no type", arm.label),
                });
            }
            if !seen.insert(arm.label.as_str()) {
                return Err(ExtractionError::DuplicateArmLabel(arm.label.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasureGroup {
    pub group_id: String,
    #[serde(default)]
    pub unit: String,
    #[serde(default)]
    pub value: String,
    #[serde(default)]
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureResult {
    pub group_id: String,
    pub value: FieldValue,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantMeasure {
    pub measure_definition: String,
    pub parameter_type: String,
    pub unit: String,
    pub groups: Vec<MeasureGroup>,
    pub results: Vec<MeasureResult>,
}

impl ParticipantMeasure {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        let ids: HashSet<&str> = self.groups.iter().map(|g| g.group_id.as_str()).collect();
        if ids.len() != self.groups.len() {
            return Err(ExtractionError::SchemaViolation { field: "groups".into(), detail: "duplicate group id".into() });
        }
        for r in &self.results {
            if !ids.contains(r.group_id.as_str()) {
                return Err(ExtractionError::UnknownGroupId(r.group_id.clone()));
            }
            if let FieldValue::Number(x) = r.value {
                if !x.is_finite() {
                    return Err(ExtractionError::SchemaViolation { field: "value".into(), detail: "non-finite".into() });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeValue {
    pub value: FieldValue,
    #[serde(default)]
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeResult {
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
    pub results: Vec<OutcomeValue>,
}

impl OutcomeResult {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if let Some(d) = self.denominator_value {
            if !(d.is_finite() && d >= 0.0) {
                return Err(ExtractionError::SchemaViolation {
                    field: "denominator_value".into(),
                    detail: format!("{d} is negative or non-finite"),
                });
            }
        }
        if self.results.is_empty() {
            return Err(ExtractionError::SchemaViolation { field: "results".into(), detail: "no results".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionTask {
    StudyCharacteristics,
    ArmDesign,
    ParticipantStatistics,
    TrialResults,
}

impl ExtractionTask {
    pub const ALL: [ExtractionTask; 4] = [
        ExtractionTask::StudyCharacteristics,
        ExtractionTask::ArmDesign,
        ExtractionTask::ParticipantStatistics,
        ExtractionTask::TrialResults,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExtractionTask::StudyCharacteristics => "study_characteristics",
            ExtractionTask::ArmDesign => "arm_design",
            ExtractionTask::ParticipantStatistics => "participant_statistics",
            ExtractionTask::TrialResults => "trial_results",
        }
    }
}

impl fmt::Display for ExtractionTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExtractionTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "study_characteristics" | "characteristics" => Ok(ExtractionTask::StudyCharacteristics),
            "arm_design" | "arms" => Ok(ExtractionTask::ArmDesign),
            "participant_statistics" | "participants" => Ok(ExtractionTask::ParticipantStatistics),
            "trial_results" | "results" => Ok(ExtractionTask::TrialResults),
            other => Err(format!("unknown extraction task `{other}`")),
        }
    }
}

/// Output of any of the four extraction tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", content = "record", rename_all = "snake_case")]
pub enum ExtractionRecord {
    StudyCharacteristics(StudyCharacteristics),
    ArmDesign(ArmDesign),
    ParticipantStatistics(ParticipantMeasure),
    TrialResults(OutcomeResult),
}

impl ExtractionRecord {
    pub fn task(&self) -> ExtractionTask {
        match self {
            ExtractionRecord::StudyCharacteristics(_) => ExtractionTask::StudyCharacteristics,
            ExtractionRecord::ArmDesign(_) => ExtractionTask::ArmDesign,
            ExtractionRecord::ParticipantStatistics(_) => ExtractionTask::ParticipantStatistics,
            ExtractionRecord::TrialResults(_) => ExtractionTask::TrialResults,
        }
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        match self {
            ExtractionRecord::StudyCharacteristics(_) => Ok(()),
            ExtractionRecord::ArmDesign(a) => a.validate(),
            ExtractionRecord::ParticipantStatistics(p) => p.validate(),
            ExtractionRecord::TrialResults(o) => o.validate(),
        }
    }

    /// Flattens the record into (field path, value, kind) triples, the unit
    /// of evaluation. Input-side fields (definitions supplied to the model)
    /// are not included.
    pub fn output_fields(&self) -> Vec<(String, FieldValue, ValueKind)> {
        let mut out = Vec::new();
        match self {
            ExtractionRecord::StudyCharacteristics(c) => {
                for (name, value) in &c.fields {
                    let kind = value.kind().unwrap_or(ValueKind::Text);
                    out.push((name.clone(), value.clone(), kind));
                }
            }
            ExtractionRecord::ArmDesign(a) => {
                for (i, arm) in a.arms.iter().enumerate() {
                    out.push((format!("arms[{i}].label"), FieldValue::Text(arm.label.clone()), ValueKind::Text));
                    out.push((format!("arms[{i}].arm_type"), FieldValue::Text(arm.arm_type.clone()), ValueKind::Text));
                    let desc = if arm.description.trim().is_empty() {
                        FieldValue::NotReported
                    } else {
                        FieldValue::Text(arm.description.clone())
                    };
                    out.push((format!("arms[{i}].description"), desc, ValueKind::Text));
                    let names = if arm.intervention_names.is_empty() {
                        FieldValue::NotReported
                    } else {
                        FieldValue::TextList(arm.intervention_names.clone())
                    };
                    out.push((format!("arms[{i}].intervention_names"), names, ValueKind::ListOfText));
                }
            }
            ExtractionRecord::ParticipantStatistics(p) => {
                for r in &p.results {
                    let kind = r.value.kind().unwrap_or(ValueKind::Number);
                    out.push((format!("results[{}].value", r.group_id), r.value.clone(), kind));
                }
            }
            ExtractionRecord::TrialResults(o) => {
                for (i, r) in o.results.iter().enumerate() {
                    let kind = r.value.kind().unwrap_or(ValueKind::Number);
                    out.push((format!("results[{i}].value"), r.value.clone(), kind));
                    let title = if r.title.trim().is_empty() {
                        FieldValue::NotReported
                    } else {
                        FieldValue::Text(r.title.clone())
                    };
                    out.push((format!("results[{i}].title"), title, ValueKind::Text));
                }
            }
        }
        out
    }
}
