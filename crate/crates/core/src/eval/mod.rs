//! Metrics for search, screening and extraction, plus report emission.

mod annotate;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{format_number, parse_number, ExtractionRecord, ExtractionTask, FieldValue, ValueKind};
use crate::gateway::{cosine, Gateway, GatewayError};

pub use annotate::{adjudicate, load_verdicts, AdjudicatedItem, AnnotatorVerdict};
pub use report::{
    stratify, write_reports, Aggregate, Axis, BinEdges, Curve, ItemScore, MetricReport, Stratification, Stratum, TaskReport,
    INPUT_LENGTH_EDGES, TRUTH_COUNT_EDGES,
};

/// Default cutoff when scoring a retrieved search result list.
pub const SEARCH_EVAL_LIMIT: usize = 3000;
pub const SOFT_MATCH_THRESHOLD: f64 = 0.75;
pub const SCREENING_KS: [usize; 2] = [10, 20];
const EMBED_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("unparseable number {0:?}")]
    UnparseableNumber(String),
    #[error("alignment error: {0}")]
    AlignmentError(String),
    #[error("item {0} lacks metadata for the requested axis")]
    MissingAxisMetadata(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Cutoff for recall@k. `Auto` uses the number of ground-truth studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum K {
    Fixed(usize),
    Auto,
}

impl K {
    pub fn resolve(self, truth_len: usize) -> usize {
        match self {
            K::Fixed(k) => k,
            K::Auto => truth_len,
        }
    }

    pub fn label(self) -> String {
        match self {
            K::Fixed(k) => format!("recall@{k}"),
            K::Auto => "recall@K".to_string(),
        }
    }
}

/// |top-k ∩ truth| / |truth|. Repeated ids in the list count once.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], truth: &BTreeSet<String>, k: K) -> Result<f64, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let k = k.resolve(truth.len());
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let top: HashSet<&str> = ranked.iter().take(k).map(AsRef::as_ref).collect();
    let hits = truth.iter().filter(|t| top.contains(t.as_str())).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Recall at each k, in the order given.
pub fn recall_curve<S: AsRef<str>>(ranked: &[S], truth: &BTreeSet<String>, ks: &[usize]) -> Result<Vec<(usize, f64)>, EvalError> {
    ks.iter().map(|&k| recall_at_k(ranked, truth, K::Fixed(k)).map(|r| (k, r))).collect()
}

/// A value ready for exact numeric comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NumericValue {
    Number(f64),
    NotReported,
}

pub fn normalize_numeric(value: &FieldValue) -> Result<NumericValue, EvalError> {
    match value {
        FieldValue::NotReported => Ok(NumericValue::NotReported),
        FieldValue::Number(x) => Ok(NumericValue::Number(*x)),
        FieldValue::Text(s) => {
            parse_number(s).map(NumericValue::Number).ok_or_else(|| EvalError::UnparseableNumber(s.clone()))
        }
        FieldValue::TextList(items) => Err(EvalError::UnparseableNumber(items.join("; "))),
    }
}

/// Exact equality after normalization. NOT_REPORTED matches only itself.
pub fn match_numeric(pred: &FieldValue, gold: &FieldValue) -> Result<bool, EvalError> {
    let (p, g) = (normalize_numeric(pred)?, normalize_numeric(gold)?);
    Ok(match (p, g) {
        (NumericValue::Number(a), NumericValue::Number(b)) => a == b,
        (NumericValue::NotReported, NumericValue::NotReported) => true,
        _ => false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    ExactNumeric,
    SoftText,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRule {
    pub kind: MatchKind,
    /// Soft-text threshold in (0, 1].
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// `similarity >= threshold` when set, `>` otherwise.
    #[serde(default = "default_inclusive")]
    pub inclusive: bool,
}

fn default_threshold() -> f64 {
    SOFT_MATCH_THRESHOLD
}

fn default_inclusive() -> bool {
    true
}

impl MatchRule {
    pub fn exact_numeric() -> Self {
        Self { kind: MatchKind::ExactNumeric, threshold: SOFT_MATCH_THRESHOLD, inclusive: true }
    }

    pub fn soft_text(threshold: f64) -> Self {
        Self { kind: MatchKind::SoftText, threshold, inclusive: true }
    }

    pub fn for_kind(kind: ValueKind, soft: SoftMatchConfig) -> Self {
        match kind {
            ValueKind::Number => Self::exact_numeric(),
            ValueKind::Text | ValueKind::ListOfText => {
                Self { kind: MatchKind::SoftText, threshold: soft.threshold, inclusive: soft.inclusive }
            }
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(EvalError::InvalidInput(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        Ok(())
    }

    pub fn passes(&self, similarity: f64) -> bool {
        if self.inclusive {
            similarity >= self.threshold
        } else {
            similarity > self.threshold
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftMatchConfig {
    pub threshold: f64,
    pub inclusive: bool,
}

impl Default for SoftMatchConfig {
    fn default() -> Self {
        Self { threshold: SOFT_MATCH_THRESHOLD, inclusive: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextMatch {
    pub matched: bool,
    pub similarity: f64,
}

/// Embeds both texts and compares their cosine similarity to the rule's
/// threshold. Symmetric in its arguments.
pub async fn match_text(pred: &str, gold: &str, gateway: &Gateway, rule: MatchRule) -> Result<TextMatch, EvalError> {
    rule.validate()?;
    if pred.trim().is_empty() || gold.trim().is_empty() {
        return Err(EvalError::InvalidInput("soft match needs two non-empty texts".into()));
    }
    let v = gateway.embed(&[pred.to_string(), gold.to_string()]).await?;
    let similarity = pair_similarity(pred, gold, v[0].values(), v[1].values());
    Ok(TextMatch { matched: rule.passes(similarity), similarity })
}

/// Identical texts score exactly 1; rounding never lifts a score above 1.
fn pair_similarity(a: &str, b: &str, va: &[f64], vb: &[f64]) -> f64 {
    if a == b {
        1.0
    } else {
        cosine(va, vb).min(1.0)
    }
}

/// Text used to embed a field value.
pub fn value_text(value: &FieldValue) -> String {
    match value {
        FieldValue::Number(x) => format_number(*x),
        other => other.to_string(),
    }
}

/// One predicted or gold extraction record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionCase {
    pub citation_id: String,
    pub record: ExtractionRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    /// Input document length in estimated tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_length: Option<usize>,
}

/// Correctness of one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldOutcome {
    pub citation_id: String,
    pub task: ExtractionTask,
    pub field: String,
    pub kind: MatchKind,
    pub predicted: FieldValue,
    pub gold: FieldValue,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn case_key(c: &ExtractionCase) -> (String, ExtractionTask) {
    (c.citation_id.clone(), c.record.task())
}

/// Scores predicted records against gold, field by field.
///
/// Records are aligned by (citation, task); each side must cover the same
/// keys. Fields are those of the gold record: a field the prediction lacks
/// counts as NOT_REPORTED, and extra predicted fields are not scored. A
/// prediction that is not a number in a numeric field is incorrect.
pub async fn evaluate_extraction(
    task_name: &str,
    predictions: &[ExtractionCase],
    gold: &[ExtractionCase],
    gateway: &Gateway,
    soft: SoftMatchConfig,
) -> Result<(MetricReport, Vec<FieldOutcome>), EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::AlignmentError("no predictions".into()));
    }
    if gold.is_empty() {
        return Err(EvalError::AlignmentError("no gold records".into()));
    }
    let mut pred_by_key: BTreeMap<(String, ExtractionTask), &ExtractionCase> = BTreeMap::new();
    for p in predictions {
        if pred_by_key.insert(case_key(p), p).is_some() {
            return Err(EvalError::AlignmentError(format!("duplicate prediction for {} {}", p.citation_id, p.record.task())));
        }
    }
    let mut gold_keys = BTreeSet::new();
    for g in gold {
        if !gold_keys.insert(case_key(g)) {
            return Err(EvalError::AlignmentError(format!("duplicate gold record for {} {}", g.citation_id, g.record.task())));
        }
        if !pred_by_key.contains_key(&case_key(g)) {
            return Err(EvalError::AlignmentError(format!("no prediction for {} {}", g.citation_id, g.record.task())));
        }
    }
    if let Some((cid, task)) = pred_by_key.keys().find(|k| !gold_keys.contains(*k)) {
        return Err(EvalError::AlignmentError(format!("prediction for {cid} {task} has no gold record")));
    }

    let soft_rule = MatchRule::for_kind(ValueKind::Text, soft);
    soft_rule.validate()?;
    let mut outcomes = Vec::new();
    let mut meta = Vec::new();
    let mut pending: Vec<(usize, String, String)> = Vec::new();
    for g in gold {
        let p = pred_by_key[&case_key(g)];
        let predicted: HashMap<String, FieldValue> =
            p.record.output_fields().into_iter().map(|(name, value, _)| (name, value)).collect();
        for (field, gold_value, kind) in g.record.output_fields() {
            let pred_value = predicted.get(&field).cloned().unwrap_or(FieldValue::NotReported);
            let rule = MatchRule::for_kind(kind, soft);
            let mut outcome = FieldOutcome {
                citation_id: g.citation_id.clone(),
                task: g.record.task(),
                field,
                kind: rule.kind,
                predicted: pred_value.clone(),
                gold: gold_value.clone(),
                correct: false,
                similarity: None,
                note: None,
            };
            match rule.kind {
                MatchKind::ExactNumeric => {
                    normalize_numeric(&gold_value)?;
                    match match_numeric(&pred_value, &gold_value) {
                        Ok(ok) => outcome.correct = ok,
                        Err(EvalError::UnparseableNumber(s)) => outcome.note = Some(format!("prediction {s:?} is not a number")),
                        Err(e) => return Err(e),
                    }
                }
                MatchKind::SoftText => match (pred_value.is_reported(), gold_value.is_reported()) {
                    (false, false) => outcome.correct = true,
                    (true, true) => pending.push((outcomes.len(), value_text(&pred_value), value_text(&gold_value))),
                    _ => {}
                },
            }
            outcomes.push(outcome);
            meta.push((g.topic.clone(), g.input_length));
        }
    }

    let mut unique: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (_, a, b) in &pending {
        for t in [a, b] {
            if !index.contains_key(t) {
                index.insert(t.clone(), unique.len());
                unique.push(t.clone());
            }
        }
    }
    let mut vectors = Vec::with_capacity(unique.len());
    for chunk in unique.chunks(EMBED_BATCH) {
        vectors.extend(gateway.embed(chunk).await?);
    }
    for (i, a, b) in pending {
        let similarity = pair_similarity(&a, &b, vectors[index[&a]].values(), vectors[index[&b]].values());
        outcomes[i].similarity = Some(similarity);
        outcomes[i].correct = soft_rule.passes(similarity);
    }

    let items = outcomes
        .iter()
        .zip(meta)
        .map(|(o, (topic, input_length))| ItemScore {
            item_id: format!("{}/{}/{}", o.citation_id, o.task, o.field),
            score: if o.correct { 1.0 } else { 0.0 },
            topic,
            truth_count: None,
            input_length,
            group: Some(match o.kind {
                MatchKind::ExactNumeric => "numeric".to_string(),
                MatchKind::SoftText => "text".to_string(),
            }),
        })
        .collect();
    let report = MetricReport::new(task_name, "accuracy", items)?;
    Ok((report, outcomes))
}

/// One review's retrieved or ranked list with its target studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCase {
    pub review_id: String,
    pub ranked: Vec<String>,
    pub truth: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

/// One recall report per cutoff, with reviews as items.
pub fn evaluate_retrieval(task_name: &str, cases: &[RetrievalCase], ks: &[K]) -> Result<Vec<MetricReport>, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::InvalidInput("no retrieval cases".into()));
    }
    ks.iter()
        .map(|&k| {
            let items = cases
                .iter()
                .map(|c| {
                    Ok(ItemScore {
                        item_id: c.review_id.clone(),
                        score: recall_at_k(&c.ranked, &c.truth, k)?,
                        topic: c.topic.clone(),
                        truth_count: Some(c.truth.len()),
                        input_length: None,
                        group: None,
                    })
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            MetricReport::new(task_name, &k.label(), items)
        })
        .collect()
}

/// Mean recall at each k across cases, for recall-versus-K plots.
pub fn mean_recall_curve(cases: &[RetrievalCase], ks: &[usize]) -> Result<Vec<(usize, f64)>, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::InvalidInput("no retrieval cases".into()));
    }
    ks.iter()
        .map(|&k| {
            let total: f64 =
                cases.iter().map(|c| recall_at_k(&c.ranked, &c.truth, K::Fixed(k))).sum::<Result<f64, _>>()?;
            Ok((k, total / cases.len() as f64))
        })
        .collect()
}
