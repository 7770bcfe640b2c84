//! Instruction-corpus construction from reviews, citations and linked trial
//! records: PICO extraction, synthetic search targets, screening rationales,
//! extraction pairs, candidate pools and review-level splits.

mod corpus;
mod pool;
mod types;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::extraction::{
    default_characteristic_fields, prepare_document, ExtractionError, FieldValue, StudyDocument,
    DEFAULT_MAX_DOCUMENT_TOKENS, NOT_REPORTED,
};
use crate::gateway::{extract_json, Attempt, Gateway, GatewayError, TaskKind, TemplateSet};
use crate::query::{
    assemble_ground_truth_query, extract_study_terms, serialize_query, validate_query, Dialect, Facet, QueryError,
    SearchOptions, TermSet,
};
use crate::registry::{PublicationCitation, PublicationRegistry, RegistryError, TrialRecord};
use crate::screening::{render_criteria, run_assessment, score_assessments, Criterion, Pico, ScreeningError};

pub use corpus::*;
pub use pool::*;
pub use types::*;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstructError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("review {0} has no PICO")]
    MissingPico(String),
    #[error("need at least 5 reviews to split, got {0}")]
    TooFewReviews(usize),
    #[error("unparseable model output: {0}")]
    UnparseableModelOutput(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Screening(#[from] ScreeningError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
}

fn parse_pico(text: &str) -> Result<Pico, String> {
    let value = extract_json(text)?;
    let field = |name: &str| -> Result<Option<String>, String> {
        match value.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.trim().to_string()).filter(|s| !s.is_empty())),
            Some(other) => Err(format!("`{name}` is not text: {other}")),
        }
    };
    let population = field("population")?.ok_or("empty population")?;
    let intervention = field("intervention")?.ok_or("empty intervention")?;
    Ok(Pico { population, intervention, comparison: field("comparison")?, outcome: field("outcome")? })
}

/// Reads the review's PICO from its abstract.
pub async fn extract_pico(review: &ReviewTopic, gateway: &Gateway) -> Result<Pico, InstructError> {
    if review.abstract_text.trim().is_empty() {
        return Err(InstructError::InvalidInput(format!("review {} has no abstract", review.review_id)));
    }
    let request = gateway
        .request(TaskKind::PicoExtract, &[("title", &review.title), ("abstract", &review.abstract_text)])?
        .with_tag(TaskKind::PicoExtract, review.review_id.clone());
    let parsed = gateway
        .complete_with_reprompt(&request, TaskKind::PicoExtract, |t| match parse_pico(t) {
            Ok(p) => Attempt::Done(p),
            Err(e) => Attempt::Retry(InstructError::UnparseableModelOutput(e)),
        })
        .await?;
    Ok(parsed.value)
}

fn datum(
    templates: &TemplateSet,
    kind: TaskKind,
    vars: &[(&str, &str)],
    output: String,
    task: CorpusTask,
    provenance: Provenance,
) -> Result<InstructionDatum, InstructError> {
    let template = templates.get(kind);
    Ok(InstructionDatum {
        instruction: template.system.clone(),
        input: template.render_pairs(vars)?,
        output,
        task,
        provenance,
    })
}

fn review_provenance(review_id: &str) -> Provenance {
    Provenance { review_id: review_id.to_string(), citation_id: None, trial_id: None }
}

/// Outcome of synthesizing and validating one review's ground-truth query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBuildReport {
    pub review_id: String,
    pub query: Option<String>,
    pub recall: Option<f64>,
    pub accepted: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBuildOptions {
    pub threshold: f64,
    pub limit: usize,
    pub dialect: Dialect,
}

impl Default for SearchBuildOptions {
    fn default() -> Self {
        Self {
            threshold: crate::query::RECALL_THRESHOLD,
            limit: crate::registry::SEARCH_EVAL_LIMIT,
            dialect: Dialect::PublicationRegistry,
        }
    }
}

async fn synthesize_query(
    review: &ReviewTopic,
    gateway: &Gateway,
    searcher: &dyn PublicationRegistry,
    options: SearchBuildOptions,
) -> Result<(crate::query::QueryBundle, crate::query::QueryValidation), InstructError> {
    review.validate()?;
    let ids: Vec<String> = review.included_study_ids.iter().cloned().collect();
    let fetched = searcher.fetch_citations(&ids).await?;
    if !fetched.unresolved.is_empty() {
        return Err(InstructError::InvalidInput(format!("unresolved included studies: {}", fetched.unresolved.join(", "))));
    }
    let sets = futures::future::join_all(fetched.records.iter().map(|c| async move {
        let p = extract_study_terms(gateway, c, Facet::Population).await?;
        let i = extract_study_terms(gateway, c, Facet::Intervention).await?;
        Ok::<(TermSet, TermSet), QueryError>((p, i))
    }))
    .await
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let (p_sets, i_sets): (Vec<_>, Vec<_>) = sets.into_iter().unzip();
    let bundle = assemble_ground_truth_query(&p_sets, &i_sets)?;
    let validation = validate_query(
        &bundle,
        &review.included_study_ids,
        searcher,
        options.threshold,
        SearchOptions { limit: options.limit, date_ceiling: Some(review.publication_date) },
    )
    .await?;
    Ok((bundle, validation))
}

/// Per review: extract per-study terms, assemble the ground-truth query,
/// validate its recall and keep it only when accepted. Failures are logged
/// per review and never abort the batch.
pub async fn build_search_instructions(
    reviews: &[ReviewTopic],
    gateway: &Gateway,
    searcher: &dyn PublicationRegistry,
    options: SearchBuildOptions,
) -> (Vec<InstructionDatum>, Vec<SearchBuildReport>) {
    let outcomes = futures::future::join_all(reviews.iter().map(|r| synthesize_query(r, gateway, searcher, options))).await;
    let mut data = Vec::new();
    let mut reports = Vec::new();
    for (review, outcome) in reviews.iter().zip(outcomes) {
        let built = outcome.and_then(|(bundle, validation)| {
            let text = serialize_query(&bundle.final_query, options.dialect)?;
            if !validation.accepted {
                return Ok((text, validation, None));
            }
            let pico = review.pico()?;
            let d = datum(
                gateway.templates(),
                TaskKind::Search,
                &[
                    ("population", &pico.population),
                    ("intervention", &pico.intervention),
                    ("comparison", &pico.comparison_text()),
                    ("outcome", &pico.outcome_text()),
                ],
                text.clone(),
                CorpusTask::Search,
                review_provenance(&review.review_id),
            )?;
            Ok((text, validation, Some(d)))
        });
        match built {
            Ok((text, validation, d)) => {
                reports.push(SearchBuildReport {
                    review_id: review.review_id.clone(),
                    query: Some(text),
                    recall: Some(validation.recall),
                    accepted: validation.accepted,
                    error: None,
                });
                data.extend(d);
            }
            Err(e) => {
                tracing::warn!(review = %review.review_id, error = %e, "search target skipped");
                reports.push(SearchBuildReport {
                    review_id: review.review_id.clone(),
                    query: None,
                    recall: None,
                    accepted: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    (data, reports)
}

/// Counts from one screening build.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreeningBuildStats {
    pub generated: usize,
    pub dropped_negative_included: usize,
    pub failed: usize,
    pub retained: usize,
}

/// One datum per pool candidate: criterion-level analysis generated with the
/// ground-truth eligibility disclosed. Included studies whose analysis
/// scores below zero are dropped.
pub async fn build_screening_instructions(
    review: &ReviewTopic,
    candidates: &[PublicationCitation],
    gateway: &Gateway,
) -> Result<(Vec<InstructionDatum>, ScreeningBuildStats), InstructError> {
    let pico = review.pico()?;
    let criteria = Criterion::from_pico(pico);
    let criteria_text = render_criteria(&criteria);
    let outcomes = futures::future::join_all(candidates.iter().map(|c| {
        let criteria = &criteria;
        async move {
            let included = review.included_study_ids.contains(&c.citation_id);
            let eligibility = if included { "included" } else { "excluded" };
            let subject = format!("{}/{}", review.review_id, c.citation_id);
            let request = crate::screening::assessment_request(gateway, criteria, c, &subject, Some(eligibility))?;
            let (assessments, _) = run_assessment(gateway, &request, TaskKind::RationaleGen, criteria).await?;
            Ok::<_, ScreeningError>((included, assessments))
        }
    }))
    .await;
    let mut stats = ScreeningBuildStats::default();
    let mut data = Vec::new();
    for (c, outcome) in candidates.iter().zip(outcomes) {
        let (included, assessments) = match outcome {
            Ok(v) => v,
            Err(e) => {
                tracing::warn!(review = %review.review_id, citation = %c.citation_id, error = %e, "rationale skipped");
                stats.failed += 1;
                continue;
            }
        };
        stats.generated += 1;
        let score = score_assessments(&assessments)?;
        if included && score < 0.0 {
            stats.dropped_negative_included += 1;
            continue;
        }
        let output = serde_json::to_string(&json!({ "assessments": assessments, "overall_score": score }))
            .expect("assessments serialize");
        data.push(datum(
            gateway.templates(),
            TaskKind::Screening,
            &[
                ("criteria", &criteria_text),
                ("citation_id", &c.citation_id),
                ("title", &c.title),
                ("abstract", &c.abstract_text),
            ],
            output,
            CorpusTask::Screening,
            Provenance { review_id: review.review_id.clone(), citation_id: Some(c.citation_id.clone()), trial_id: None },
        )?);
    }
    stats.retained = data.len();
    Ok((data, stats))
}

/// A pair that yielded fewer than four extraction data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionShortfall {
    pub citation_id: String,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionBuild {
    pub data: Vec<InstructionDatum>,
    pub shortfalls: Vec<ExtractionShortfall>,
    /// Citations no review includes; their data would have no split.
    pub unassigned: Vec<String>,
}

fn value_json(v: FieldValue) -> Value {
    v.to_json()
}

fn list_or_marker(items: &[String]) -> Value {
    if items.is_empty() {
        json!(NOT_REPORTED)
    } else {
        json!(items)
    }
}

/// Targets read from the linked trial record.
pub fn characteristics_target(trial: &TrialRecord) -> Value {
    json!({
        "conditions": list_or_marker(&trial.conditions),
        "interventions": list_or_marker(&trial.interventions),
        "enrollment": if trial.enrollment > 0 { json!(trial.enrollment) } else { json!(NOT_REPORTED) },
        "study_type": if trial.study_type.trim().is_empty() { json!(NOT_REPORTED) } else { json!(trial.study_type) },
    })
}

fn render_fields_for_prompt() -> String {
    default_characteristic_fields()
        .iter()
        .map(|f| {
            let kind = match f.value_kind {
                crate::extraction::ValueKind::Text => "text",
                crate::extraction::ValueKind::Number => "number",
                crate::extraction::ValueKind::ListOfText => "list of text",
            };
            format!("- {} ({kind}): {}", f.name, f.description)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Lowest review id that includes each citation.
pub fn owning_reviews(reviews: &[ReviewTopic]) -> BTreeMap<String, String> {
    let mut owner: BTreeMap<String, String> = BTreeMap::new();
    for r in reviews {
        for id in &r.included_study_ids {
            owner
                .entry(id.clone())
                .and_modify(|cur| {
                    if r.review_id < *cur {
                        *cur = r.review_id.clone();
                    }
                })
                .or_insert_with(|| r.review_id.clone());
        }
    }
    owner
}

/// Up to four data per (publication, trial) pair, one per extraction task
/// the trial record supplies a target for. Each datum belongs to the
/// lowest-id review that includes the publication.
pub fn build_extraction_instructions(
    pairs: &[(PublicationCitation, TrialRecord)],
    reviews: &[ReviewTopic],
    templates: &TemplateSet,
    max_tokens: usize,
) -> Result<ExtractionBuild, InstructError> {
    let owners = owning_reviews(reviews);
    let mut build = ExtractionBuild::default();
    for (citation, trial) in pairs {
        let Some(review_id) = owners.get(&citation.citation_id) else {
            tracing::warn!(citation = %citation.citation_id, "pair skipped: no review includes it");
            build.unassigned.push(citation.citation_id.clone());
            continue;
        };
        let doc: StudyDocument = prepare_document(citation, max_tokens)?;
        let document = doc.render();
        let provenance = Provenance {
            review_id: review_id.clone(),
            citation_id: Some(citation.citation_id.clone()),
            trial_id: Some(trial.trial_id.clone()),
        };
        let mut missing = Vec::new();
        let cid = citation.citation_id.as_str();

        build.data.push(datum(
            templates,
            TaskKind::CharExtract,
            &[("fields", &render_fields_for_prompt()), ("citation_id", cid), ("document", &document)],
            characteristics_target(trial).to_string(),
            CorpusTask::StudyCharacteristics,
            provenance.clone(),
        )?);

        if trial.arms.is_empty() {
            missing.push(CorpusTask::ArmDesign.as_str().to_string());
        } else {
            build.data.push(datum(
                templates,
                TaskKind::ArmExtract,
                &[("citation_id", cid), ("document", &document)],
                json!({ "arms": trial.arms }).to_string(),
                CorpusTask::ArmDesign,
                provenance.clone(),
            )?);
        }

        match trial.participant_flow.first() {
            None => missing.push(CorpusTask::ParticipantStatistics.as_str().to_string()),
            Some(m) => {
                let groups = m
                    .groups
                    .iter()
                    .map(|g| {
                        let mut line = format!("- {}: {}", g.group_id, g.definition);
                        if !g.value.is_empty() {
                            line.push_str(format!(" (n = {} {})", g.value, g.unit).trim_end());
                        }
                        line
                    })
                    .collect::<Vec<_>>()
                    .join("\n");
                let results: Vec<Value> = m
                    .results
                    .iter()
                    .map(|r| json!({ "group_id": r.group_id, "value": value_json(r.value.clone()), "notes": r.notes }))
                    .collect();
                build.data.push(datum(
                    templates,
                    TaskKind::ParticipantExtract,
                    &[
                        ("measure_definition", &m.measure_definition),
                        ("parameter_type", &m.parameter_type),
                        ("unit", &m.unit),
                        ("groups", &groups),
                        ("citation_id", cid),
                        ("document", &document),
                    ],
                    json!({ "results": results }).to_string(),
                    CorpusTask::ParticipantStatistics,
                    provenance.clone(),
                )?);
            }
        }

        match trial.reported_results.first() {
            None => missing.push(CorpusTask::TrialResults.as_str().to_string()),
            Some(o) => {
                let denominator =
                    o.denominator_value.map(crate::extraction::format_number).unwrap_or_else(|| NOT_REPORTED.to_string());
                build.data.push(datum(
                    templates,
                    TaskKind::ResultExtract,
                    &[
                        ("outcome_definition", &o.outcome_definition),
                        ("group_definition", &o.group_definition),
                        ("parameter_type", &o.parameter_type),
                        ("unit", &o.unit),
                        ("timeframe", &o.timeframe),
                        ("denominator_value", &denominator),
                        ("denominator_unit", &o.denominator_unit),
                        ("citation_id", cid),
                        ("document", &document),
                    ],
                    json!({ "unit": o.unit, "results": o.results }).to_string(),
                    CorpusTask::TrialResults,
                    provenance.clone(),
                )?);
            }
        }
        if !missing.is_empty() {
            tracing::info!(citation = cid, missing = ?missing, "pair yields fewer than four extraction data");
            build.shortfalls.push(ExtractionShortfall { citation_id: cid.to_string(), missing });
        }
    }
    Ok(build)
}

/// Inputs for a whole corpus build.
pub struct CorpusInputs<'a> {
    pub reviews: Vec<ReviewTopic>,
    pub pairs: Vec<(PublicationCitation, TrialRecord)>,
    pub searcher: &'a dyn PublicationRegistry,
    pub gateway: &'a Gateway,
    pub seed: u64,
    pub pool_capacity: usize,
    pub search: SearchBuildOptions,
}

/// Runs every builder and assigns data to splits. Reviews without a PICO get
/// one extracted first.
pub async fn build_corpus(mut inputs: CorpusInputs<'_>) -> Result<Corpus, InstructError> {
    let gateway = inputs.gateway;
    for review in inputs.reviews.iter_mut() {
        if review.pico.is_none() {
            review.pico = Some(extract_pico(review, gateway).await?);
        }
    }
    inputs.reviews.retain(|r| {
        let keep = !r.included_study_ids.is_empty();
        if !keep {
            tracing::info!(review = %r.review_id, "review without included studies removed");
        }
        keep
    });
    let ids: Vec<String> = inputs.reviews.iter().map(|r| r.review_id.clone()).collect();
    let split = split_dataset(&ids, inputs.seed)?;

    let (mut data, search_reports) = build_search_instructions(&inputs.reviews, gateway, inputs.searcher, inputs.search).await;

    let mut screening = ScreeningBuildStats::default();
    let mut pools = Vec::new();
    for review in &inputs.reviews {
        let queries = PoolQueries::from_pico(review.pico()?)?;
        let pool = build_candidate_pool(review, &queries, inputs.searcher, inputs.pool_capacity).await?;
        let fetched = inputs.searcher.fetch_citations(&pool.ids()).await?;
        let (d, stats) = build_screening_instructions(review, &fetched.records, gateway).await?;
        screening.generated += stats.generated;
        screening.dropped_negative_included += stats.dropped_negative_included;
        screening.failed += stats.failed;
        screening.retained += stats.retained;
        data.extend(d);
        pools.push((review.review_id.clone(), pool.len(), pool.injected()));
    }

    let extraction = build_extraction_instructions(&inputs.pairs, &inputs.reviews, gateway.templates(), DEFAULT_MAX_DOCUMENT_TOKENS)?;
    let extraction_pairs_used = inputs.pairs.len() - extraction.unassigned.len();
    data.extend(extraction.data);

    let raw = RawCounts {
        search_reviews: search_reports.len(),
        search_accepted: search_reports.iter().filter(|r| r.accepted).count(),
        search_failed: search_reports.iter().filter(|r| r.error.is_some()).count(),
        screening_generated: screening.generated,
        screening_dropped_negative_included: screening.dropped_negative_included,
        screening_failed: screening.failed,
        extraction_pairs: extraction_pairs_used,
        extraction_pairs_unassigned: extraction.unassigned.len(),
        pool_sizes: pools.iter().map(|(id, n, _)| (id.clone(), *n)).collect(),
        pool_injected: pools.iter().map(|(id, _, k)| (id.clone(), *k)).collect(),
    };
    let thresholds = Thresholds {
        recall_threshold: inputs.search.threshold,
        search_limit: inputs.search.limit,
        pool_capacity: inputs.pool_capacity,
        max_document_tokens: DEFAULT_MAX_DOCUMENT_TOKENS,
    };
    Corpus::assemble(data, split, thresholds, raw)
}

/// Included-study ids of every review, for checks that need the union.
pub fn all_included(reviews: &[ReviewTopic]) -> BTreeSet<String> {
    reviews.iter().flat_map(|r| r.included_study_ids.iter().cloned()).collect()
}
