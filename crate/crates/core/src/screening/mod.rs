//! Criterion-level eligibility screening and candidate ranking.
//!
//! The main ranker labels each criterion YES/PARTIAL/UNCERTAIN/NO and scores
//! a candidate by the mean label score in [-1, 1]. Three baselines rank by
//! embedding similarity, a single 1-10 score, or 1-10 scores against
//! model-written criteria.

mod types;

use std::collections::{HashMap, HashSet};

use serde_json::Value;
use thiserror::Error;

use crate::gateway::{extract_json, Attempt, ChatRequest, Gateway, GatewayError, TaskKind};
use crate::registry::PublicationCitation;

pub use types::*;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScreeningError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unparseable model output: {0}")]
    UnparseableModelOutput(String),
    #[error("model skipped criterion {0}")]
    MissingCriterion(String),
    #[error("no assessments to score")]
    EmptyAssessments,
    #[error("duplicate candidate {0}")]
    DuplicateCandidate(String),
    #[error("all {0} candidates failed")]
    AllCandidatesFailed(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn check_citation(c: &PublicationCitation) -> Result<(), ScreeningError> {
    if c.title.trim().is_empty() && c.abstract_text.trim().is_empty() {
        return Err(ScreeningError::InvalidInput(format!("{} has no title or abstract", c.citation_id)));
    }
    Ok(())
}

fn check_candidates(candidates: &[PublicationCitation]) -> Result<(), ScreeningError> {
    if candidates.is_empty() {
        return Err(ScreeningError::InvalidInput("no candidates".into()));
    }
    let mut seen = HashSet::new();
    for c in candidates {
        if !seen.insert(c.citation_id.as_str()) {
            return Err(ScreeningError::DuplicateCandidate(c.citation_id.clone()));
        }
    }
    Ok(())
}

/// Reads `{"assessments": [...]}` (or a bare array) into one assessment per
/// criterion, in criterion order.
pub fn parse_assessments(text: &str, criteria: &[Criterion]) -> Result<Vec<CriterionAssessment>, ScreeningError> {
    let value = extract_json(text).map_err(ScreeningError::UnparseableModelOutput)?;
    let items = match &value {
        Value::Array(items) => items,
        Value::Object(map) => map
            .get("assessments")
            .and_then(Value::as_array)
            .ok_or_else(|| ScreeningError::UnparseableModelOutput("missing `assessments` array".into()))?,
        _ => return Err(ScreeningError::UnparseableModelOutput("expected an object or array".into())),
    };
    let known: HashSet<&str> = criteria.iter().map(|c| c.criterion_id.as_str()).collect();
    let mut by_id: HashMap<String, CriterionAssessment> = HashMap::new();
    for item in items {
        let field = |name: &str| item.get(name).and_then(Value::as_str).map(str::trim);
        let id = field("criterion_id")
            .ok_or_else(|| ScreeningError::UnparseableModelOutput("assessment without criterion_id".into()))?;
        if !known.contains(id) {
            return Err(ScreeningError::UnparseableModelOutput(format!("unknown criterion {id:?}")));
        }
        let label: Label = field("label")
            .ok_or_else(|| ScreeningError::UnparseableModelOutput(format!("{id}: missing label")))?
            .parse()?;
        let rationale = field("rationale").unwrap_or_default();
        if rationale.is_empty() {
            return Err(ScreeningError::UnparseableModelOutput(format!("{id}: empty rationale")));
        }
        let a = CriterionAssessment { criterion_id: id.to_string(), label, rationale: rationale.to_string() };
        if by_id.insert(id.to_string(), a).is_some() {
            return Err(ScreeningError::UnparseableModelOutput(format!("criterion {id} assessed twice")));
        }
    }
    criteria
        .iter()
        .map(|c| by_id.remove(&c.criterion_id).ok_or_else(|| ScreeningError::MissingCriterion(c.criterion_id.clone())))
        .collect()
}

/// Request for the criterion-level prompt. `eligibility` switches to the
/// rationale-generation template used for instruction data.
pub(crate) fn assessment_request(
    gateway: &Gateway,
    criteria: &[Criterion],
    citation: &PublicationCitation,
    subject: &str,
    eligibility: Option<&str>,
) -> Result<ChatRequest, ScreeningError> {
    let criteria_text = render_criteria(criteria);
    let mut vars = vec![
        ("criteria", criteria_text.as_str()),
        ("citation_id", citation.citation_id.as_str()),
        ("title", citation.title.as_str()),
        ("abstract", citation.abstract_text.as_str()),
    ];
    let task = match eligibility {
        Some(e) => {
            vars.push(("eligibility", e));
            TaskKind::RationaleGen
        }
        None => TaskKind::Screening,
    };
    Ok(gateway.request(task, &vars)?.with_tag(task, subject.to_string()))
}

pub(crate) async fn run_assessment(
    gateway: &Gateway,
    request: &ChatRequest,
    task: TaskKind,
    criteria: &[Criterion],
) -> Result<(Vec<CriterionAssessment>, String), ScreeningError> {
    let parsed = gateway
        .complete_with_reprompt(request, task, |text| match parse_assessments(text, criteria) {
            Ok(a) => Attempt::Done(a),
            Err(e) => Attempt::Retry(e),
        })
        .await?;
    Ok((parsed.value, parsed.raw))
}

/// Labels every criterion for one citation. `subject` identifies the request
/// to deterministic mocks (typically `review/citation`).
pub async fn assess_citation(
    criteria: &[Criterion],
    citation: &PublicationCitation,
    gateway: &Gateway,
    subject: &str,
) -> Result<EligibilityResult, ScreeningError> {
    validate_criteria(criteria)?;
    check_citation(citation)?;
    let request = assessment_request(gateway, criteria, citation, subject, None)?;
    let (assessments, _) = run_assessment(gateway, &request, TaskKind::Screening, criteria).await?;
    let overall_score = score_assessments(&assessments)?;
    Ok(EligibilityResult { citation_id: citation.citation_id.clone(), assessments, overall_score })
}

fn finish(review_id: &str, ranker: Ranker, entries: Vec<RankedEntry>) -> Result<RankedList, ScreeningError> {
    if !entries.is_empty() && entries.iter().all(|e| e.failed) {
        return Err(ScreeningError::AllCandidatesFailed(entries.len()));
    }
    let list = RankedList::new(review_id, ranker, entries)?;
    if list.failures() > 0 {
        tracing::warn!(review = review_id, ranker = ranker.as_str(), failures = list.failures(), "candidates scored as failures");
    }
    Ok(list)
}

/// Criterion-level ranking. A candidate whose assessment fails scores 0 and
/// is flagged, never dropped.
pub async fn rank_candidates(
    review_id: &str,
    criteria: &[Criterion],
    candidates: &[PublicationCitation],
    gateway: &Gateway,
) -> Result<RankedList, ScreeningError> {
    validate_criteria(criteria)?;
    check_candidates(candidates)?;
    let results = futures::future::join_all(candidates.iter().map(|c| {
        let subject = format!("{review_id}/{}", c.citation_id);
        async move { assess_citation(criteria, c, gateway, &subject).await }
    }))
    .await;
    let entries = candidates
        .iter()
        .zip(results)
        .map(|(c, r)| match r {
            Ok(res) => RankedEntry {
                citation_id: res.citation_id,
                score: res.overall_score,
                assessments: res.assessments,
                failed: false,
                error: None,
            },
            Err(e) => RankedEntry::failure(&c.citation_id, e),
        })
        .collect();
    finish(review_id, Ranker::CriterionLlm, entries)
}

const EMBED_BATCH: usize = 256;

/// Cosine similarity between the PICO text and each title+abstract.
pub async fn dense_rank(
    review_id: &str,
    pico: &Pico,
    candidates: &[PublicationCitation],
    gateway: &Gateway,
) -> Result<RankedList, ScreeningError> {
    pico.validate()?;
    check_candidates(candidates)?;
    let query = gateway.embed(&[pico.to_text()]).await?.remove(0);
    let mut entries = Vec::with_capacity(candidates.len());
    for chunk in candidates.chunks(EMBED_BATCH) {
        let texts: Vec<String> = chunk.iter().map(PublicationCitation::searchable_text).collect();
        let vectors = gateway.embed(&texts).await?;
        for (c, v) in chunk.iter().zip(vectors) {
            if v.dimension() != query.dimension() {
                return Err(GatewayError::DimensionMismatch { expected: query.dimension(), got: v.dimension() }.into());
            }
            entries.push(RankedEntry::scored(&c.citation_id, query.cosine(&v)));
        }
    }
    RankedList::new(review_id, Ranker::Dense, entries)
}

/// Maps a 1-10 score onto [-1, 1].
pub fn normalize_ten_point(score: f64) -> f64 {
    (score - 5.5) / 4.5
}

/// Strict 1-10 integer: optional "score:" prefix, optional "/10" suffix.
pub fn parse_ten_point(text: &str) -> Result<u8, ScreeningError> {
    static PATTERN: std::sync::LazyLock<regex::Regex> = std::sync::LazyLock::new(|| {
        regex::Regex::new(r"(?i)^\s*(?:score\s*[:=]?\s*)?(\d{1,2})\s*(?:/\s*10)?\s*\.?\s*$").unwrap()
    });
    let caps = PATTERN
        .captures(text)
        .ok_or_else(|| ScreeningError::UnparseableModelOutput(format!("not a 1-10 score: {text:?}")))?;
    let n: u8 = caps[1].parse().expect("regex guarantees digits");
    if !(1..=10).contains(&n) {
        return Err(ScreeningError::UnparseableModelOutput(format!("score {n} outside 1-10")));
    }
    Ok(n)
}

/// One prompt per candidate asking for a single 1-10 score.
pub async fn simple_score_rank(
    review_id: &str,
    pico: &Pico,
    candidates: &[PublicationCitation],
    gateway: &Gateway,
) -> Result<RankedList, ScreeningError> {
    pico.validate()?;
    check_candidates(candidates)?;
    let pico_text = pico.to_text();
    let results = futures::future::join_all(candidates.iter().map(|c| {
        let pico_text = &pico_text;
        async move {
            let request = gateway
                .request(
                    TaskKind::SimpleScore,
                    &[("pico", pico_text), ("citation_id", &c.citation_id), ("title", &c.title), ("abstract", &c.abstract_text)],
                )?
                .with_tag(TaskKind::SimpleScore, format!("{review_id}/{}", c.citation_id));
            let parsed = gateway
                .complete_with_reprompt(&request, TaskKind::SimpleScore, |t| match parse_ten_point(t) {
                    Ok(n) => Attempt::Done(n),
                    Err(e) => Attempt::Retry(e),
                })
                .await?;
            Ok::<_, ScreeningError>(normalize_ten_point(parsed.value as f64))
        }
    }))
    .await;
    let entries = candidates
        .iter()
        .zip(results)
        .map(|(c, r)| match r {
            Ok(score) => RankedEntry::scored(&c.citation_id, score),
            Err(e) => RankedEntry::failure(&c.citation_id, e),
        })
        .collect();
    finish(review_id, Ranker::SimpleScore, entries)
}

fn parse_criteria_list(text: &str) -> Result<Vec<String>, ScreeningError> {
    let items = crate::gateway::extract_string_list(text).map_err(ScreeningError::UnparseableModelOutput)?;
    let items: Vec<String> = items.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(ScreeningError::UnparseableModelOutput("no criteria generated".into()));
    }
    Ok(items)
}

fn parse_score_vector(text: &str, k: usize) -> Result<Vec<u8>, ScreeningError> {
    let value = extract_json(text).map_err(ScreeningError::UnparseableModelOutput)?;
    let items = value
        .as_array()
        .ok_or_else(|| ScreeningError::UnparseableModelOutput("expected a JSON array of integers".into()))?;
    if items.len() != k {
        return Err(ScreeningError::UnparseableModelOutput(format!("{} scores for {k} criteria", items.len())));
    }
    items
        .iter()
        .map(|v| match v.as_u64() {
            Some(n @ 1..=10) => Ok(n as u8),
            _ => Err(ScreeningError::UnparseableModelOutput(format!("score {v} is not an integer in 1-10"))),
        })
        .collect()
}

/// Output of the two-stage baseline: the generated criteria and the ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageOutcome {
    pub criteria: Vec<String>,
    pub ranked: RankedList,
}

/// Stage 1 writes criteria from the PICO; stage 2 scores each candidate 1-10
/// against every criterion. Candidate score is the normalized mean.
pub async fn two_stage_rank(
    review_id: &str,
    pico: &Pico,
    candidates: &[PublicationCitation],
    gateway: &Gateway,
) -> Result<TwoStageOutcome, ScreeningError> {
    pico.validate()?;
    check_candidates(candidates)?;
    let template = gateway.templates().get(TaskKind::TwoStageScore).clone();
    let stage1 = gateway
        .request(TaskKind::TwoStageScore, &[("pico", &pico.to_text())])?
        .with_tag(TaskKind::TwoStageScore, format!("{review_id}/criteria"));
    let criteria = gateway
        .complete_with_reprompt(&stage1, TaskKind::TwoStageScore, |t| match parse_criteria_list(t) {
            Ok(c) => Attempt::Done(c),
            Err(e) => Attempt::Retry(e),
        })
        .await?
        .value;
    let k = criteria.len();
    let criteria_text = criteria.iter().enumerate().map(|(i, c)| format!("{}. {c}", i + 1)).collect::<Vec<_>>().join("\n");
    let results = futures::future::join_all(candidates.iter().map(|c| {
        let template = &template;
        let criteria_text = &criteria_text;
        async move {
            let body = template.render_followup_pairs(&[
                ("criteria", criteria_text),
                ("citation_id", &c.citation_id),
                ("title", &c.title),
                ("abstract", &c.abstract_text),
            ])?;
            let request = ChatRequest::new(template.system.clone(), body)
                .with_tag(TaskKind::TwoStageScore, format!("{review_id}/{}", c.citation_id));
            let scores = gateway
                .complete_with_reprompt(&request, TaskKind::TwoStageScore, |t| match parse_score_vector(t, k) {
                    Ok(s) => Attempt::Done(s),
                    Err(e) => Attempt::Retry(e),
                })
                .await?
                .value;
            let mean = scores.iter().map(|&s| s as f64).sum::<f64>() / k as f64;
            Ok::<_, ScreeningError>(normalize_ten_point(mean))
        }
    }))
    .await;
    let entries = candidates
        .iter()
        .zip(results)
        .map(|(c, r)| match r {
            Ok(score) => RankedEntry::scored(&c.citation_id, score),
            Err(e) => RankedEntry::failure(&c.citation_id, e),
        })
        .collect();
    Ok(TwoStageOutcome { criteria, ranked: finish(review_id, Ranker::TwoStage, entries)? })
}

/// Runs any ranker. Criterion-level ranking uses criteria derived from the PICO.
pub async fn rank_with(
    ranker: Ranker,
    review_id: &str,
    pico: &Pico,
    candidates: &[PublicationCitation],
    gateway: &Gateway,
) -> Result<RankedList, ScreeningError> {
    match ranker {
        Ranker::CriterionLlm => rank_candidates(review_id, &Criterion::from_pico(pico), candidates, gateway).await,
        Ranker::Dense => dense_rank(review_id, pico, candidates, gateway).await,
        Ranker::SimpleScore => simple_score_rank(review_id, pico, candidates, gateway).await,
        Ranker::TwoStage => Ok(two_stage_rank(review_id, pico, candidates, gateway).await?.ranked),
    }
}
