//! End-to-end run over a fixture corpus: search, screening, extraction and
//! evaluation, with every output written to disk deterministically.
//!
//! Fixture layout:
//! - `registry/publications/*.json` and optional `registry/trials/*.json`
//! - `reviews.json`: review topics with PICO
//! - `candidates.json`: review id to the candidate ids to screen
//! - `extraction.json`: extraction cases with their gold records
//! - `responses.json`: scripted model replies keyed by task and subject

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    evaluate_extraction, evaluate_retrieval, mean_recall_curve, write_reports, Axis, Curve, EvalError, ExtractionCase,
    RetrievalCase, SoftMatchConfig, TaskReport, K, SEARCH_EVAL_LIMIT,
};
use crate::extraction::{
    extract_arm_design, extract_participant_statistics, extract_study_characteristics, extract_trial_results,
    prepare_document, ExtractionError, ExtractionRecord, ExtractionTask, FieldSpec, MeasureSpec, OutcomeSpec,
    DEFAULT_MAX_DOCUMENT_TOKENS,
};
use crate::gateway::{Gateway, MockBackend, ScriptedResponder};
use crate::instruct::ReviewTopic;
use crate::query::{format_query_file, generate_search_query, GenerationRun, QueryError, QueryFileEntry};
use crate::registry::{search_publications_with, FixtureStore, PublicationRegistry, RegistryError};
use crate::screening::{rank_candidates, Criterion, RankedList, ScreeningError};

pub const SCREENING_CURVE_KS: [usize; 6] = [5, 10, 20, 30, 40, 50];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("fixture {path}: {message}")]
    Fixture { path: PathBuf, message: String },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Screening(#[from] ScreeningError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// What to ask for in one extraction case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum ExtractionInput {
    StudyCharacteristics { fields: Vec<FieldSpec> },
    ArmDesign,
    ParticipantStatistics { spec: MeasureSpec },
    TrialResults { spec: OutcomeSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldExtraction {
    pub case_id: String,
    pub citation_id: String,
    pub review_id: String,
    pub input: ExtractionInput,
    pub gold: ExtractionRecord,
}

pub struct Fixture {
    pub store: FixtureStore,
    pub reviews: Vec<ReviewTopic>,
    pub candidates: BTreeMap<String, Vec<String>>,
    pub extraction: Vec<GoldExtraction>,
    pub responses_path: PathBuf,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let fixture = |message: String| PipelineError::Fixture { path: path.to_path_buf(), message };
    let text = std::fs::read_to_string(path).map_err(|e| fixture(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| fixture(e.to_string()))
}

impl Fixture {
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let fixture = Self {
            store: FixtureStore::load(dir.join("registry"))?,
            reviews: read_json(&dir.join("reviews.json"))?,
            candidates: read_json(&dir.join("candidates.json"))?,
            extraction: read_json(&dir.join("extraction.json"))?,
            responses_path: dir.join("responses.json"),
        };
        for r in &fixture.reviews {
            if r.pico.is_none() {
                return Err(PipelineError::Fixture { path: dir.join("reviews.json"), message: format!("{} has no PICO", r.review_id) });
            }
        }
        Ok(fixture)
    }

    /// A gateway answering from the scripted replies, with mock embeddings.
    pub fn gateway(&self) -> Result<Gateway, PipelineError> {
        let responder = ScriptedResponder::from_file(&self.responses_path)?;
        Ok(Gateway::mock(MockBackend::new(Arc::new(responder))))
    }
}

/// Headline numbers of a run, keyed `task.metric[.item]`.
pub type GoldenNumbers = BTreeMap<String, f64>;

pub struct RunOutput {
    pub numbers: GoldenNumbers,
    pub files: Vec<PathBuf>,
}

fn extraction_task(input: &ExtractionInput) -> ExtractionTask {
    match input {
        ExtractionInput::StudyCharacteristics { .. } => ExtractionTask::StudyCharacteristics,
        ExtractionInput::ArmDesign => ExtractionTask::ArmDesign,
        ExtractionInput::ParticipantStatistics { .. } => ExtractionTask::ParticipantStatistics,
        ExtractionInput::TrialResults { .. } => ExtractionTask::TrialResults,
    }
}

/// Runs one extraction case; the subject is the case id.
pub async fn run_extraction(
    case: &GoldExtraction,
    store: &FixtureStore,
    gateway: &Gateway,
) -> Result<(ExtractionRecord, String, usize), PipelineError> {
    let citation = store.publication(&case.citation_id).ok_or_else(|| RegistryError::NotFound(case.citation_id.clone()))?;
    let doc = prepare_document(citation, DEFAULT_MAX_DOCUMENT_TOKENS)?;
    let subject = case.case_id.as_str();
    let (record, raw) = match &case.input {
        ExtractionInput::StudyCharacteristics { fields } => {
            let x = extract_study_characteristics(&doc, fields, gateway, subject).await?;
            (ExtractionRecord::StudyCharacteristics(x.record), x.raw_response)
        }
        ExtractionInput::ArmDesign => {
            let x = extract_arm_design(&doc, gateway, subject).await?;
            (ExtractionRecord::ArmDesign(x.record), x.raw_response)
        }
        ExtractionInput::ParticipantStatistics { spec } => {
            let x = extract_participant_statistics(&doc, spec, gateway, subject).await?;
            (ExtractionRecord::ParticipantStatistics(x.record), x.raw_response)
        }
        ExtractionInput::TrialResults { spec } => {
            let x = extract_trial_results(&doc, spec, gateway, subject).await?;
            (ExtractionRecord::TrialResults(x.record), x.raw_response)
        }
    };
    Ok((record, raw, doc.token_estimate))
}

fn put(numbers: &mut GoldenNumbers, report: &crate::eval::MetricReport) {
    numbers.insert(format!("{}.{}", report.task, report.metric), report.mean());
    for (g, a) in &report.groups {
        if let Some(m) = a.mean {
            numbers.insert(format!("{}.{}.{g}", report.task, report.metric), m);
        }
    }
    if report.items.len() <= 64 {
        for i in &report.items {
            if report.task != "extraction" {
                numbers.insert(format!("{}.{}.{}", report.task, report.metric, i.item_id), i.score);
            }
        }
    }
}

/// Runs every stage and writes outputs under `out`:
/// `queries.txt`, `ranked/{review}.jsonl`, `extraction/predictions.jsonl`,
/// `reports/` and `summary.json`.
pub async fn run_golden(fixture: &Fixture, out: &Path) -> Result<RunOutput, PipelineError> {
    let gateway = fixture.gateway()?;
    let store = &fixture.store;
    let dialect = store.dialect();
    std::fs::create_dir_all(out.join("ranked"))?;
    std::fs::create_dir_all(out.join("extraction"))?;
    let reports_dir = out.join("reports");
    let mut files = Vec::new();
    let mut numbers = GoldenNumbers::new();

    let mut reviews: Vec<&ReviewTopic> = fixture.reviews.iter().collect();
    reviews.sort_by(|a, b| a.review_id.cmp(&b.review_id));

    // Search.
    let mut query_entries = Vec::new();
    let mut search_cases = Vec::new();
    for r in &reviews {
        let pico = r.pico.as_ref().expect("checked at load");
        let bundle = generate_search_query(pico, &gateway, &GenerationRun::single(&r.review_id)).await?;
        let ranked =
            search_publications_with(store, &bundle.final_query, SEARCH_EVAL_LIMIT, Some(r.publication_date)).await?;
        query_entries.push(QueryFileEntry { id: r.review_id.clone(), provenance: bundle.provenance, query: bundle.final_query });
        search_cases.push(RetrievalCase {
            review_id: r.review_id.clone(),
            ranked,
            truth: r.included_study_ids.clone(),
            topic: Some(r.review_id.clone()),
        });
    }
    let queries = out.join("queries.txt");
    std::fs::write(&queries, format_query_file(&query_entries, dialect)?)?;
    files.push(queries);
    let search_metrics = evaluate_retrieval("search", &search_cases, &[K::Fixed(SEARCH_EVAL_LIMIT), K::Auto])?
        .into_iter()
        .map(|m| m.stratified(Axis::TruthCountBin))
        .collect::<Result<Vec<_>, _>>()?;
    for m in &search_metrics {
        put(&mut numbers, m);
    }
    files.extend(write_reports(&reports_dir, &TaskReport { task: "search".into(), metrics: search_metrics, curves: Vec::new() })?);

    // Screening.
    let mut screening_cases = Vec::new();
    for r in &reviews {
        let ids = fixture.candidates.get(&r.review_id).ok_or_else(|| PipelineError::Fixture {
            path: PathBuf::from("candidates.json"),
            message: format!("no candidates for {}", r.review_id),
        })?;
        let fetched = store.fetch_citations(ids).await?;
        if let Some(missing) = fetched.unresolved.first() {
            return Err(RegistryError::NotFound(missing.clone()).into());
        }
        let criteria = Criterion::from_pico(r.pico.as_ref().expect("checked at load"));
        let ranked: RankedList = rank_candidates(&r.review_id, &criteria, &fetched.records, &gateway).await?;
        let path = out.join("ranked").join(format!("{}.jsonl", r.review_id));
        std::fs::write(&path, ranked.to_jsonl())?;
        files.push(path);
        screening_cases.push(RetrievalCase {
            review_id: r.review_id.clone(),
            ranked: ranked.entries.iter().map(|e| e.citation_id.clone()).collect(),
            truth: r.included_study_ids.clone(),
            topic: Some(r.review_id.clone()),
        });
    }
    let screening_metrics = evaluate_retrieval("screening", &screening_cases, &[K::Fixed(10), K::Fixed(20)])?
        .into_iter()
        .map(|m| m.stratified(Axis::TruthCountBin))
        .collect::<Result<Vec<_>, _>>()?;
    for m in &screening_metrics {
        put(&mut numbers, m);
    }
    let curve = Curve { name: "criterion_llm".into(), points: mean_recall_curve(&screening_cases, &SCREENING_CURVE_KS)? };
    files.extend(write_reports(
        &reports_dir,
        &TaskReport { task: "screening".into(), metrics: screening_metrics, curves: vec![curve] },
    )?);

    // Extraction.
    let mut by_task: BTreeMap<ExtractionTask, (Vec<ExtractionCase>, Vec<ExtractionCase>)> = BTreeMap::new();
    let mut predictions_jsonl = String::new();
    let mut cases: Vec<&GoldExtraction> = fixture.extraction.iter().collect();
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut seen_cases = BTreeSet::new();
    for case in cases {
        if !seen_cases.insert(&case.case_id) {
            return Err(PipelineError::Fixture { path: PathBuf::from("extraction.json"), message: format!("case {} repeated", case.case_id) });
        }
        let task = extraction_task(&case.input);
        if case.gold.task() != task {
            return Err(PipelineError::Fixture {
                path: PathBuf::from("extraction.json"),
                message: format!("case {} asks for {task} but has {} gold", case.case_id, case.gold.task()),
            });
        }
        let (record, _raw, length) = run_extraction(case, store, &gateway).await?;
        predictions_jsonl.push_str(
            &serde_json::to_string(&serde_json::json!({ "case_id": case.case_id, "citation_id": case.citation_id, "record": record }))
                .expect("records serialize"),
        );
        predictions_jsonl.push('\n');
        let entry = by_task.entry(task).or_default();
        let meta = |record: ExtractionRecord| ExtractionCase {
            citation_id: case.case_id.clone(),
            record,
            topic: Some(case.review_id.clone()),
            input_length: Some(length),
        };
        entry.0.push(meta(record));
        entry.1.push(meta(case.gold.clone()));
    }
    let predictions = out.join("extraction").join("predictions.jsonl");
    std::fs::write(&predictions, predictions_jsonl)?;
    files.push(predictions);
    let mut extraction_metrics = Vec::new();
    let (mut correct, mut total) = (0.0, 0usize);
    for (task, (pred, gold)) in &by_task {
        let (report, _) = evaluate_extraction("extraction", pred, gold, &gateway, SoftMatchConfig::default()).await?;
        let mut report = report.stratified(Axis::Topic)?.stratified(Axis::InputLengthBin)?;
        report.metric = format!("accuracy.{task}");
        correct += report.aggregate.sum;
        total += report.aggregate.count;
        put(&mut numbers, &report);
        extraction_metrics.push(report);
    }
    if total > 0 {
        numbers.insert("extraction.accuracy.overall".into(), correct / total as f64);
    }
    files.extend(write_reports(
        &reports_dir,
        &TaskReport { task: "extraction".into(), metrics: extraction_metrics, curves: Vec::new() },
    )?);

    let summary = out.join("summary.json");
    std::fs::write(&summary, serde_json::to_string_pretty(&numbers).expect("numbers serialize") + "\n")?;
    files.push(summary);
    files.sort();
    Ok(RunOutput { numbers, files })
}
