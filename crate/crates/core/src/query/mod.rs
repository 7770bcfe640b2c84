//! Boolean search queries: the AST, registry dialects, LLM query generation,
//! ground-truth query synthesis from per-study terms, and ensemble search.

mod ast;
mod syntax;

use std::collections::{BTreeSet, HashSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{extract_json, extract_string_list, Attempt, Gateway, GatewayError, TaskKind, SAMPLING_TEMPERATURE};
use crate::registry::{search_publications_with, PublicationCitation, PublicationRegistry, RegistryError};
use crate::screening::Pico;
use crate::text::normalize_term;

pub use ast::BooleanQuery;
pub use syntax::{parse_query, serialize_query, serialize_query_with, Dialect, DialectOptions};

/// Most terms kept per study and facet.
pub const MAX_TERMS_PER_STUDY: usize = 10;
/// Queries with recall strictly below this are rejected.
pub const RECALL_THRESHOLD: f64 = 0.2;
pub const DEFAULT_ENSEMBLE_RUNS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("syntax error at {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unsupported dialect {0:?}")]
    UnsupportedDialect(String),
    #[error("population and intervention term sets are misaligned: {0}")]
    MisalignedStudySets(String),
    #[error("model returned no terms for {0}")]
    EmptyExtraction(String),
    #[error("unparseable model output: {0}")]
    UnparseableModelOutput(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("all {0} ensemble runs failed")]
    AllRunsFailed(usize),
    #[error("ground truth set is empty")]
    EmptyGroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facet {
    Population,
    Intervention,
}

impl Facet {
    pub fn as_str(self) -> &'static str {
        match self {
            Facet::Population => "population",
            Facet::Intervention => "intervention",
        }
    }
}

/// Normalized search terms one study contributes to one facet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSet {
    pub facet: Facet,
    pub study_id: String,
    pub terms: Vec<String>,
}

impl TermSet {
    /// Normalizes and dedups `raw` in order, keeping the first
    /// [`MAX_TERMS_PER_STUDY`].
    pub fn new(facet: Facet, study_id: impl Into<String>, raw: &[impl AsRef<str>]) -> Result<Self, QueryError> {
        let study_id = study_id.into();
        let terms = normalized_terms(raw.iter().map(AsRef::as_ref), MAX_TERMS_PER_STUDY);
        if terms.is_empty() {
            return Err(QueryError::EmptyExtraction(format!("{study_id}/{}", facet.as_str())));
        }
        Ok(Self { facet, study_id, terms })
    }
}

fn normalized_terms<'a>(raw: impl Iterator<Item = &'a str>, cap: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    raw.map(normalize_term)
        .filter(|t| !t.is_empty() && seen.insert(t.clone()))
        .take(cap)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryProvenance {
    LlmGenerated,
    SyntheticGroundTruth,
}

impl QueryProvenance {
    pub fn as_str(self) -> &'static str {
        match self {
            QueryProvenance::LlmGenerated => "llm_generated",
            QueryProvenance::SyntheticGroundTruth => "synthetic_ground_truth",
        }
    }
}

/// Population and intervention queries with the final query that joins them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBundle {
    pub population_query: BooleanQuery,
    pub intervention_query: BooleanQuery,
    pub final_query: BooleanQuery,
    pub provenance: QueryProvenance,
}

impl QueryBundle {
    pub fn new(population: BooleanQuery, intervention: BooleanQuery, provenance: QueryProvenance) -> Self {
        let final_query = BooleanQuery::And(vec![population.clone(), intervention.clone()]);
        Self { population_query: population, intervention_query: intervention, final_query, provenance }
    }
}

/// Asks the model for `facet` terms describing one study.
pub async fn extract_study_terms(
    gateway: &Gateway,
    study: &PublicationCitation,
    facet: Facet,
) -> Result<TermSet, QueryError> {
    if study.title.trim().is_empty() && study.abstract_text.trim().is_empty() {
        return Err(QueryError::InvalidQuery(format!("{} has no title or abstract", study.citation_id)));
    }
    let request = gateway
        .request(
            TaskKind::TermExtract,
            &[("facet", facet.as_str()), ("title", &study.title), ("abstract", &study.abstract_text)],
        )?
        .with_tag(TaskKind::TermExtract, format!("{}/{}", study.citation_id, facet.as_str()));
    let parsed = gateway
        .complete_with_reprompt(&request, TaskKind::TermExtract, |text| match extract_string_list(text) {
            Ok(items) => match TermSet::new(facet, study.citation_id.clone(), &items) {
                Ok(set) => Attempt::Done(set),
                Err(e) => Attempt::Fail(e),
            },
            Err(reason) => Attempt::Retry(QueryError::UnparseableModelOutput(reason)),
        })
        .await?;
    Ok(parsed.value)
}

/// Builds the ground-truth query: per study, the AND of its terms; per facet,
/// the OR over studies; finally population AND intervention.
pub fn assemble_ground_truth_query(p_sets: &[TermSet], i_sets: &[TermSet]) -> Result<QueryBundle, QueryError> {
    if p_sets.is_empty() {
        return Err(QueryError::MisalignedStudySets("no studies".into()));
    }
    if p_sets.len() != i_sets.len() {
        return Err(QueryError::MisalignedStudySets(format!(
            "{} population sets vs {} intervention sets",
            p_sets.len(),
            i_sets.len()
        )));
    }
    for (p, i) in p_sets.iter().zip(i_sets) {
        if p.study_id != i.study_id {
            return Err(QueryError::MisalignedStudySets(format!("{} paired with {}", p.study_id, i.study_id)));
        }
        if p.facet != Facet::Population || i.facet != Facet::Intervention {
            return Err(QueryError::MisalignedStudySets(format!("wrong facet for {}", p.study_id)));
        }
    }
    let block = |set: &TermSet| BooleanQuery::all_of(&set.terms);
    let population = BooleanQuery::or(p_sets.iter().map(block).collect::<Result<_, _>>()?)?;
    let intervention = BooleanQuery::or(i_sets.iter().map(block).collect::<Result<_, _>>()?)?;
    Ok(QueryBundle::new(population, intervention, QueryProvenance::SyntheticGroundTruth))
}

/// |retrieved ∩ truth| / |truth|.
pub fn recall(retrieved: &[String], ground_truth: &BTreeSet<String>) -> Result<f64, QueryError> {
    if ground_truth.is_empty() {
        return Err(QueryError::EmptyGroundTruth);
    }
    let hits: HashSet<&String> = retrieved.iter().filter(|id| ground_truth.contains(*id)).collect();
    Ok(hits.len() as f64 / ground_truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryValidation {
    pub recall: f64,
    pub accepted: bool,
    pub retrieved: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub limit: usize,
    pub date_ceiling: Option<NaiveDate>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { limit: crate::registry::SEARCH_EVAL_LIMIT, date_ceiling: None }
    }
}

/// Runs the final query and accepts it iff recall ≥ `threshold`.
pub async fn validate_query(
    bundle: &QueryBundle,
    ground_truth: &BTreeSet<String>,
    searcher: &dyn PublicationRegistry,
    threshold: f64,
    options: SearchOptions,
) -> Result<QueryValidation, QueryError> {
    if ground_truth.is_empty() {
        return Err(QueryError::EmptyGroundTruth);
    }
    let ids = search_publications_with(searcher, &bundle.final_query, options.limit, options.date_ceiling).await?;
    let r = recall(&ids, ground_truth)?;
    Ok(QueryValidation { recall: r, accepted: r >= threshold, retrieved: ids.len() })
}

/// Sampling controls for one generation call.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRun {
    pub subject: String,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl GenerationRun {
    pub fn single(subject: impl Into<String>) -> Self {
        Self { subject: subject.into(), temperature: crate::gateway::JUDGMENT_TEMPERATURE, seed: None }
    }
}

fn parse_generated(text: &str) -> Result<(Vec<String>, Vec<String>), String> {
    let value = extract_json(text)?;
    let facet = |name: &str| -> Result<Vec<String>, String> {
        let items = value.get(name).and_then(|v| v.as_array()).ok_or_else(|| format!("missing `{name}` list"))?;
        let raw: Vec<&str> = items.iter().filter_map(|v| v.as_str()).collect();
        if raw.len() != items.len() {
            return Err(format!("`{name}` contains non-string items"));
        }
        let terms = normalized_terms(raw.into_iter(), usize::MAX);
        if terms.is_empty() {
            return Err(format!("`{name}` list is empty"));
        }
        Ok(terms)
    };
    Ok((facet("population")?, facet("intervention")?))
}

/// Asks the model for population and intervention keywords and joins them as
/// `(OR of population terms) AND (OR of intervention terms)`.
pub async fn generate_search_query(pico: &Pico, gateway: &Gateway, run: &GenerationRun) -> Result<QueryBundle, QueryError> {
    pico.validate().map_err(|e| QueryError::InvalidQuery(e.to_string()))?;
    let comparison = pico.comparison_text();
    let outcome = pico.outcome_text();
    let mut request = gateway
        .request(
            TaskKind::Search,
            &[
                ("population", &pico.population),
                ("intervention", &pico.intervention),
                ("comparison", &comparison),
                ("outcome", &outcome),
            ],
        )?
        .with_temperature(run.temperature)
        .with_tag(TaskKind::Search, run.subject.clone());
    request.seed = run.seed;
    let parsed = gateway
        .complete_with_reprompt(&request, TaskKind::Search, |text| match parse_generated(text) {
            Ok(v) => Attempt::Done(v),
            Err(reason) => Attempt::Retry(QueryError::UnparseableModelOutput(reason)),
        })
        .await?;
    let (p, i) = parsed.value;
    Ok(QueryBundle::new(BooleanQuery::any_of(&p)?, BooleanQuery::any_of(&i)?, QueryProvenance::LlmGenerated))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRun {
    pub run: usize,
    pub query: Option<BooleanQuery>,
    pub hits: usize,
    pub recall: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    /// Union of run results in first-seen order (run index, then rank).
    pub ids: Vec<String>,
    pub runs: Vec<EnsembleRun>,
    pub union_recall: Option<f64>,
}

/// Samples `runs` queries, executes each and unions the results.
///
/// With `runs == 1` this is exactly one [`generate_search_query`] call with
/// [`GenerationRun::single`] followed by its search. Otherwise run `i` samples
/// at [`SAMPLING_TEMPERATURE`] with seed `i`.
pub async fn ensemble_search(
    pico: &Pico,
    review_id: &str,
    gateway: &Gateway,
    searcher: &dyn PublicationRegistry,
    runs: usize,
    options: SearchOptions,
    ground_truth: Option<&BTreeSet<String>>,
) -> Result<EnsembleResult, QueryError> {
    if runs == 0 {
        return Err(QueryError::InvalidQuery("runs must be at least 1".into()));
    }
    if ground_truth.is_some_and(BTreeSet::is_empty) {
        return Err(QueryError::EmptyGroundTruth);
    }
    let settings: Vec<GenerationRun> = if runs == 1 {
        vec![GenerationRun::single(review_id)]
    } else {
        (0..runs)
            .map(|i| GenerationRun {
                subject: format!("{review_id}#{i}"),
                temperature: SAMPLING_TEMPERATURE,
                seed: Some(i as u64),
            })
            .collect()
    };
    let outcomes = futures::future::join_all(settings.iter().map(|run| async move {
        let bundle = generate_search_query(pico, gateway, run).await?;
        let ids = search_publications_with(searcher, &bundle.final_query, options.limit, options.date_ceiling).await?;
        Ok::<_, QueryError>((bundle, ids))
    }))
    .await;

    let mut union = Vec::new();
    let mut seen = HashSet::new();
    let mut reports = Vec::with_capacity(runs);
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((bundle, ids)) => {
                let r = ground_truth.map(|gt| recall(&ids, gt)).transpose()?;
                reports.push(EnsembleRun { run: i, query: Some(bundle.final_query), hits: ids.len(), recall: r, error: None });
                for id in ids {
                    if seen.insert(id.clone()) {
                        union.push(id);
                    }
                }
            }
            Err(e) => {
                tracing::warn!(run = i, error = %e, "ensemble run failed");
                reports.push(EnsembleRun { run: i, query: None, hits: 0, recall: None, error: Some(e.to_string()) });
            }
        }
    }
    if reports.iter().all(|r| r.error.is_some()) {
        return Err(QueryError::AllRunsFailed(runs));
    }
    let union_recall = ground_truth.map(|gt| recall(&union, gt)).transpose()?;
    Ok(EnsembleResult { ids: union, runs: reports, union_recall })
}

/// One query in a query file.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFileEntry {
    pub id: String,
    pub provenance: QueryProvenance,
    pub query: BooleanQuery,
}

/// Query file: for each entry, `# id:` and `# provenance:` header comments
/// followed by the serialized query on one line.
pub fn format_query_file(entries: &[QueryFileEntry], dialect: Dialect) -> Result<String, QueryError> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("# id: {}\n# provenance: {}\n", e.id, e.provenance.as_str()));
        out.push_str(&serialize_query(&e.query, dialect)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_query_file(text: &str, dialect: Dialect) -> Result<Vec<QueryFileEntry>, QueryError> {
    let mut entries = Vec::new();
    let mut id = None;
    let mut provenance = QueryProvenance::LlmGenerated;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("id:") {
                id = Some(v.trim().to_string());
            } else if let Some(v) = comment.strip_prefix("provenance:") {
                provenance = match v.trim() {
                    "llm_generated" => QueryProvenance::LlmGenerated,
                    "synthetic_ground_truth" => QueryProvenance::SyntheticGroundTruth,
                    other => return Err(QueryError::InvalidQuery(format!("unknown provenance {other:?}"))),
                };
            }
            continue;
        }
        let query = parse_query(line, dialect)?;
        let entry_id = id.take().unwrap_or_else(|| format!("q{}", entries.len() + 1));
        entries.push(QueryFileEntry { id: entry_id, provenance, query });
        provenance = QueryProvenance::LlmGenerated;
    }
    Ok(entries)
}
