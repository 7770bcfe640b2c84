//! Reviewer workbench: projects, randomized Expert-only / Expert+AI arms,
//! timed screening and extraction sessions, and arm comparison reports.
//!
//! Every state change is an event in the project's append-only log. The
//! expert_only arm never sees scores, labels, rationales or prefills.

pub mod http;
mod report;
mod store;
mod types;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Duration, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{recall_at_k, EvalError, K};
use crate::extraction::{default_characteristic_fields, ExtractionRecord, ExtractionTask, FieldSpec, ValueKind};
use crate::gateway::Gateway;
use crate::screening::rank_order;

pub use report::{
    arm_comparison, ArmComparison, ArmStats, KindComparison, ScoreBand, ScoreBandRow, TimeBin, SCORE_BAND_FALSE_MAX,
    SCORE_BAND_TRUE_MIN, TIME_BIN_EDGES,
};
pub use store::{Event, LogEntry, ProjectState, ProjectStore, DEFAULT_SNAPSHOT_EVERY, EVENTS_FILE, SNAPSHOT_FILE};
pub use types::*;

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unbalanced assignment: {0}")]
    UnbalancedAssignment(String),
    #[error("project {0} already exists")]
    ProjectExists(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("no arm assignment for {0}")]
    NoAssignment(String),
    #[error("session {0} is already open")]
    SessionAlreadyOpen(String),
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("no AI reference for {0}")]
    MissingAiSheet(String),
    #[error("duplicate decision for {0}")]
    DuplicateDecision(String),
    #[error("{selected} selections exceed the cap of {cap}")]
    SelectionCapExceeded { selected: usize, cap: usize },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("session {0} belongs to the expert_only arm")]
    Blinded(String),
    #[error("missing or wrong project token")]
    Unauthorized,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<std::io::Error> for WorkbenchError {
    fn from(e: std::io::Error) -> Self {
        WorkbenchError::Storage(e.to_string())
    }
}

/// Source of server-side timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

/// Wall clock at millisecond precision.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        let now = Utc::now();
        DateTime::from_timestamp_millis(now.timestamp_millis()).unwrap_or(now)
    }
}

/// Clock moved only by hand, for tests and replays.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Mutex::new(start))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().expect("clock lock") += by;
    }

    pub fn advance_secs(&self, secs: i64) {
        self.advance(Duration::seconds(secs));
    }

    pub fn set(&self, to: DateTime<Utc>) {
        *self.0.lock().expect("clock lock") = to;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock")
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

fn derived_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seeded half/half split of the reviews for each participant. Deterministic
/// for a given seed, participant and review set.
pub fn assign_arms(
    reviews: &[String],
    participants: &[String],
    seed: u64,
) -> Result<BTreeMap<String, BTreeMap<String, Arm>>, WorkbenchError> {
    let sorted: BTreeSet<&String> = reviews.iter().collect();
    if sorted.is_empty() || !sorted.len().is_multiple_of(2) {
        return Err(WorkbenchError::UnbalancedAssignment(format!(
            "{} reviews cannot be split into equal halves",
            sorted.len()
        )));
    }
    let seed_text = seed.to_string();
    let mut out = BTreeMap::new();
    for p in participants {
        let mut order: Vec<&String> = sorted.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(&["arms", &seed_text, p]));
        order.shuffle(&mut rng);
        let half = order.len() / 2;
        let arms = order
            .into_iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), if i < half { Arm::ExpertOnly } else { Arm::ExpertAi }))
            .collect();
        out.insert(p.clone(), arms);
    }
    Ok(out)
}

/// Seeded presentation order for the expert_only arm.
pub fn shuffled_candidates(review: &ReviewMaterials, participant: &str, seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = review.candidates.iter().map(|c| c.citation_id.clone()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(&["screening", &seed.to_string(), &review.review_id, participant]));
    ids.shuffle(&mut rng);
    ids
}

/// The review's AI sheet ordered by overall score, highest first.
pub fn build_ai_sheet(review: &ReviewMaterials) -> Result<AiSheet, WorkbenchError> {
    let list = review.ai_sheet.as_ref().ok_or_else(|| WorkbenchError::MissingAiSheet(review.review_id.clone()))?;
    let mut entries = list.entries.clone();
    entries.sort_by(rank_order);
    Ok(AiSheet {
        review_id: review.review_id.clone(),
        ranker: list.ranker,
        rows: entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| AiSheetRow { rank: i + 1, citation_id: e.citation_id, overall_score: e.score, assessments: e.assessments })
            .collect(),
    })
}

pub fn validate_config(config: &ProjectConfig) -> Result<(), WorkbenchError> {
    let bad = |m: String| Err(WorkbenchError::InvalidInput(m));
    if !valid_id(&config.project_id) {
        return bad(format!("project id {:?} must be letters, digits, '-', '_' or '.'", config.project_id));
    }
    if config.participants.is_empty() {
        return bad("no participants".into());
    }
    let mut seen = HashSet::new();
    for p in &config.participants {
        if p.trim().is_empty() || !seen.insert(p) {
            return bad(format!("participant id {p:?} empty or repeated"));
        }
    }
    if config.candidates_per_session == 0 || config.max_selections == 0 || config.max_selections > config.candidates_per_session {
        return bad(format!(
            "selection cap {} must be within 1..={} candidates",
            config.max_selections, config.candidates_per_session
        ));
    }
    let mut reviews = HashSet::new();
    for r in &config.reviews {
        if !reviews.insert(r.review_id.as_str()) {
            return bad(format!("review {} listed twice", r.review_id));
        }
        if r.candidates.len() != config.candidates_per_session {
            return bad(format!(
                "review {} has {} candidates, sessions need {}",
                r.review_id,
                r.candidates.len(),
                config.candidates_per_session
            ));
        }
        let ids: BTreeSet<&str> = r.candidates.iter().map(|c| c.citation_id.as_str()).collect();
        if ids.len() != r.candidates.len() {
            return bad(format!("review {} repeats a candidate", r.review_id));
        }
        if r.ground_truth.is_empty() {
            return bad(format!("review {} has no ground truth", r.review_id));
        }
        if let Some(sheet) = &r.ai_sheet {
            let sheet_ids: BTreeSet<&str> = sheet.entries.iter().map(|e| e.citation_id.as_str()).collect();
            if sheet_ids != ids || sheet.entries.len() != ids.len() {
                return bad(format!("AI sheet of review {} does not cover its candidates exactly", r.review_id));
            }
            if sheet.entries.iter().any(|e| !e.score.is_finite()) {
                return bad(format!("AI sheet of review {} has a non-finite score", r.review_id));
            }
        }
    }
    let mut studies = HashSet::new();
    for s in &config.extraction_studies {
        if !studies.insert(s.citation_id.as_str()) {
            return bad(format!("extraction study {} listed twice", s.citation_id));
        }
        if !reviews.contains(s.review_id.as_str()) {
            return bad(format!("extraction study {} names unknown review {}", s.citation_id, s.review_id));
        }
        let mut tasks = HashSet::new();
        for t in &s.tasks {
            if !tasks.insert(t.task) {
                return bad(format!("study {} lists task {} twice", s.citation_id, t.task));
            }
            for r in [&t.ai_prefill, &t.gold].into_iter().flatten() {
                if r.task() != t.task {
                    return bad(format!("study {} task {} carries a {} record", s.citation_id, t.task, r.task()));
                }
            }
        }
    }
    Ok(())
}

fn elapsed_seconds(from: DateTime<Utc>, to: DateTime<Utc>) -> f64 {
    (to - from).num_milliseconds() as f64 / 1000.0
}

/// Fields a characteristics submission must fill.
pub fn characteristic_fields(materials: &ExtractionTaskMaterials) -> Vec<FieldSpec> {
    if materials.fields.is_empty() {
        default_characteristic_fields()
    } else {
        materials.fields.clone()
    }
}

/// Checks a submitted record against the task's schema.
pub fn check_submitted_record(
    record: &ExtractionRecord,
    task: ExtractionTask,
    materials: &ExtractionTaskMaterials,
) -> Result<(), WorkbenchError> {
    if record.task() != task {
        return Err(WorkbenchError::SchemaViolation(format!("expected a {task} record, got {}", record.task())));
    }
    record.validate().map_err(|e| WorkbenchError::SchemaViolation(e.to_string()))?;
    if let ExtractionRecord::StudyCharacteristics(c) = record {
        let specs = characteristic_fields(materials);
        for spec in &specs {
            let value = c
                .fields
                .get(&spec.name)
                .ok_or_else(|| WorkbenchError::SchemaViolation(format!("field {} missing", spec.name)))?;
            if let Some(kind) = value.kind() {
                let ok = kind == spec.value_kind || (spec.value_kind == ValueKind::ListOfText && kind == ValueKind::Text);
                if !ok {
                    return Err(WorkbenchError::SchemaViolation(format!(
                        "field {} expects {:?}, got {:?}",
                        spec.name, spec.value_kind, kind
                    )));
                }
            }
        }
        if let Some(extra) = c.fields.keys().find(|k| !specs.iter().any(|s| &s.name == *k)) {
            return Err(WorkbenchError::SchemaViolation(format!("unknown field {extra}")));
        }
    }
    Ok(())
}

fn screening_recall(decisions: &[Decision], truth: &BTreeSet<String>) -> Result<f64, WorkbenchError> {
    let selected: Vec<&str> =
        decisions.iter().filter(|d| d.verdict == Verdict::Include).map(|d| d.citation_id.as_str()).collect();
    Ok(recall_at_k(&selected, truth, K::Fixed(selected.len().max(1)))?)
}

type Shared = Arc<Mutex<ProjectStore>>;

/// All projects under one data directory.
pub struct Workbench {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    gateway: Arc<Gateway>,
    snapshot_every: u64,
    projects: RwLock<BTreeMap<String, Shared>>,
}

impl Workbench {
    /// Loads every project found under `root`.
    pub fn open(root: &Path, clock: Arc<dyn Clock>, gateway: Arc<Gateway>) -> Result<Self, WorkbenchError> {
        std::fs::create_dir_all(root)?;
        let mut projects = BTreeMap::new();
        for entry in std::fs::read_dir(root)? {
            let dir = entry?.path();
            if dir.join(EVENTS_FILE).exists() {
                let store = ProjectStore::open(&dir)?;
                projects.insert(store.state().config.project_id.clone(), Arc::new(Mutex::new(store)));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            clock,
            gateway,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            projects: RwLock::new(projects),
        })
    }

    pub fn with_snapshot_every(mut self, n: u64) -> Self {
        self.snapshot_every = n.max(1);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn project_ids(&self) -> Vec<String> {
        self.projects.read().expect("project map lock").keys().cloned().collect()
    }

    fn project(&self, project_id: &str) -> Result<Shared, WorkbenchError> {
        self.projects
            .read()
            .expect("project map lock")
            .get(project_id)
            .cloned()
            .ok_or_else(|| WorkbenchError::NotFound(format!("project {project_id}")))
    }

    fn project_of_session(&self, session_id: &str) -> Result<Shared, WorkbenchError> {
        let project = session_id
            .rsplit_once('~')
            .map(|(p, _)| p)
            .ok_or_else(|| WorkbenchError::NotFound(format!("session {session_id}")))?;
        self.project(project).map_err(|_| WorkbenchError::NotFound(format!("session {session_id}")))
    }

    fn with_store<T>(
        &self,
        shared: &Shared,
        f: impl FnOnce(&mut ProjectStore, DateTime<Utc>) -> Result<T, WorkbenchError>,
    ) -> Result<T, WorkbenchError> {
        let mut store = shared.lock().expect("project lock");
        let now = self.clock.now();
        f(&mut store, now)
    }

    /// Checks the bearer token of the project, or of the project owning a session.
    pub fn authorize(&self, project_or_session: &str, token: Option<&str>) -> Result<(), WorkbenchError> {
        let shared = self.project(project_or_session).or_else(|_| self.project_of_session(project_or_session))?;
        let store = shared.lock().expect("project lock");
        match &store.state().config.token {
            Some(expected) if Some(expected.as_str()) != token => Err(WorkbenchError::Unauthorized),
            _ => Ok(()),
        }
    }

    /// Validates the config, assigns arms with its seed and starts the log.
    pub fn create_project(&self, config: ProjectConfig) -> Result<ProjectSummary, WorkbenchError> {
        validate_config(&config)?;
        let review_ids: Vec<String> = config.reviews.iter().map(|r| r.review_id.clone()).collect();
        let assignments = assign_arms(&review_ids, &config.participants, config.seed)?;
        let mut map = self.projects.write().expect("project map lock");
        if map.contains_key(&config.project_id) {
            return Err(WorkbenchError::ProjectExists(config.project_id.clone()));
        }
        let dir = self.root.join(&config.project_id);
        let store = ProjectStore::create(&dir, config, assignments)?.with_snapshot_every(self.snapshot_every);
        let summary = summarize(store.state());
        map.insert(summary.project_id.clone(), Arc::new(Mutex::new(store)));
        Ok(summary)
    }

    pub fn project_summary(&self, project_id: &str) -> Result<ProjectSummary, WorkbenchError> {
        let shared = self.project(project_id)?;
        let store = shared.lock().expect("project lock");
        Ok(summarize(store.state()))
    }

    /// A copy of the project's full state.
    pub fn state(&self, project_id: &str) -> Result<ProjectState, WorkbenchError> {
        let shared = self.project(project_id)?;
        let store = shared.lock().expect("project lock");
        Ok(store.state().clone())
    }

    pub fn queue(&self, project_id: &str, participant_id: &str) -> Result<Queue, WorkbenchError> {
        let shared = self.project(project_id)?;
        let store = shared.lock().expect("project lock");
        let state = store.state();
        let arms = state
            .assignments
            .get(participant_id)
            .ok_or_else(|| WorkbenchError::NoAssignment(format!("participant {participant_id}")))?;
        let status = |open: bool| if open { QueueStatus::Open } else { QueueStatus::Submitted };
        let screening = state
            .config
            .reviews
            .iter()
            .map(|r| {
                let session = state.screening.values().find(|s| s.review_id == r.review_id && s.participant_id == participant_id);
                ScreeningQueueItem {
                    review_id: r.review_id.clone(),
                    arm: arms[&r.review_id],
                    status: session.map_or(QueueStatus::Pending, |s| status(s.is_open())),
                    session_id: session.map(|s| s.session_id.clone()),
                }
            })
            .collect();
        let mut extraction = Vec::new();
        for study in &state.config.extraction_studies {
            for t in &study.tasks {
                let session = state.extraction.values().find(|s| {
                    s.citation_id == study.citation_id && s.task == t.task && s.participant_id == participant_id
                });
                extraction.push(ExtractionQueueItem {
                    citation_id: study.citation_id.clone(),
                    task: t.task,
                    arm: arms[&study.review_id],
                    status: session.map_or(QueueStatus::Pending, |s| status(s.is_open())),
                    session_id: session.map(|s| s.session_id.clone()),
                });
            }
        }
        Ok(Queue { project_id: project_id.into(), participant_id: participant_id.into(), screening, extraction })
    }

    /// Starts the timer. The expert_only arm gets a seeded shuffle; the
    /// expert_ai arm gets the AI sheet order and the sheet itself.
    pub fn open_screening_session(
        &self,
        project_id: &str,
        review_id: &str,
        participant_id: &str,
    ) -> Result<ScreeningView, WorkbenchError> {
        let shared = self.project(project_id)?;
        self.with_store(&shared, |store, now| {
            let state = store.state();
            let review = state
                .config
                .review(review_id)
                .ok_or_else(|| WorkbenchError::NotFound(format!("review {review_id}")))?;
            let arm = *state
                .assignments
                .get(participant_id)
                .and_then(|a| a.get(review_id))
                .ok_or_else(|| WorkbenchError::NoAssignment(format!("{participant_id} / {review_id}")))?;
            if let Some(s) = state.screening.values().find(|s| s.review_id == review_id && s.participant_id == participant_id) {
                return Err(if s.is_open() {
                    WorkbenchError::SessionAlreadyOpen(s.session_id.clone())
                } else {
                    WorkbenchError::SessionClosed(s.session_id.clone())
                });
            }
            let candidates = match arm {
                Arm::ExpertOnly => shuffled_candidates(review, participant_id, state.config.seed),
                Arm::ExpertAi => build_ai_sheet(review)?.rows.into_iter().map(|r| r.citation_id).collect(),
            };
            let session = ScreeningSession {
                session_id: format!("{project_id}~s{:05}", state.screening.len() + 1),
                review_id: review_id.into(),
                participant_id: participant_id.into(),
                arm,
                candidates,
                started_at: now,
                submission: None,
                corrections: Vec::new(),
            };
            let id = session.session_id.clone();
            store.append(Event::ScreeningOpened { session })?;
            screening_view(store.state(), &id)
        })
    }

    pub fn screening_view(&self, session_id: &str) -> Result<ScreeningView, WorkbenchError> {
        let shared = self.project_of_session(session_id)?;
        let store = shared.lock().expect("project lock");
        screening_view(store.state(), session_id)
    }

    pub fn ai_sheet(&self, session_id: &str) -> Result<AiSheet, WorkbenchError> {
        let shared = self.project_of_session(session_id)?;
        let store = shared.lock().expect("project lock");
        let state = store.state();
        let session = screening_session(state, session_id)?;
        if session.arm == Arm::ExpertOnly {
            return Err(WorkbenchError::Blinded(session_id.into()));
        }
        build_ai_sheet(state.config.review(&session.review_id).expect("validated review"))
    }

    /// Closes the session atomically: every decision is stored or none is.
    pub fn submit_decisions(&self, session_id: &str, input: SubmitDecisions) -> Result<SessionMetrics, WorkbenchError> {
        let shared = self.project_of_session(session_id)?;
        self.with_store(&shared, |store, now| {
            let state = store.state();
            let session = screening_session(state, session_id)?;
            if !session.is_open() {
                return Err(WorkbenchError::SessionClosed(session_id.into()));
            }
            let decisions = check_decisions(session, &input, state.config.max_selections, now)?;
            let elapsed = elapsed_seconds(session.started_at, now);
            if elapsed <= 0.0 {
                return Err(WorkbenchError::InvalidInput("submitted at the instant the session opened".into()));
            }
            let truth = &state.config.review(&session.review_id).expect("validated review").ground_truth;
            let recall = screening_recall(&decisions, truth)?;
            let selections = decisions.iter().filter(|d| d.verdict == Verdict::Include).count();
            let submission = ScreeningSubmission {
                decisions,
                submitted_at: now,
                elapsed_seconds: elapsed,
                client_elapsed_seconds: input.client_elapsed_seconds,
                partial: input.partial,
                recall,
            };
            store.append(Event::ScreeningSubmitted { session_id: session_id.into(), submission })?;
            Ok(SessionMetrics { session_id: session_id.into(), selections, recall, elapsed_seconds: elapsed })
        })
    }

    /// Records replacement decisions for a submitted session without
    /// touching the original submission.
    pub fn correct_decisions(
        &self,
        session_id: &str,
        input: SubmitDecisions,
        reason: &str,
    ) -> Result<SessionMetrics, WorkbenchError> {
        if reason.trim().is_empty() {
            return Err(WorkbenchError::InvalidInput("a correction needs a reason".into()));
        }
        let shared = self.project_of_session(session_id)?;
        self.with_store(&shared, |store, now| {
            let state = store.state();
            let session = screening_session(state, session_id)?;
            let submitted = session
                .submission
                .as_ref()
                .ok_or_else(|| WorkbenchError::InvalidInput(format!("session {session_id} is not submitted yet")))?;
            let decisions = check_decisions(session, &input, state.config.max_selections, now)?;
            let truth = &state.config.review(&session.review_id).expect("validated review").ground_truth;
            let recall = screening_recall(&decisions, truth)?;
            let selections = decisions.iter().filter(|d| d.verdict == Verdict::Include).count();
            let elapsed = submitted.elapsed_seconds;
            let correction = ScreeningCorrection { decisions, corrected_at: now, reason: reason.into(), recall };
            store.append(Event::ScreeningCorrected { session_id: session_id.into(), correction })?;
            Ok(SessionMetrics { session_id: session_id.into(), selections, recall, elapsed_seconds: elapsed })
        })
    }

    pub fn open_extraction_session(
        &self,
        project_id: &str,
        citation_id: &str,
        task: ExtractionTask,
        participant_id: &str,
    ) -> Result<ExtractionView, WorkbenchError> {
        let shared = self.project(project_id)?;
        self.with_store(&shared, |store, now| {
            let state = store.state();
            let study = state
                .config
                .study(citation_id)
                .ok_or_else(|| WorkbenchError::NotFound(format!("extraction study {citation_id}")))?;
            let materials = state
                .config
                .task_materials(citation_id, task)
                .ok_or_else(|| WorkbenchError::NotFound(format!("{task} task for {citation_id}")))?;
            let arm = *state
                .assignments
                .get(participant_id)
                .and_then(|a| a.get(&study.review_id))
                .ok_or_else(|| WorkbenchError::NoAssignment(format!("{participant_id} / {}", study.review_id)))?;
            if let Some(s) = state
                .extraction
                .values()
                .find(|s| s.citation_id == citation_id && s.task == task && s.participant_id == participant_id)
            {
                return Err(if s.is_open() {
                    WorkbenchError::SessionAlreadyOpen(s.session_id.clone())
                } else {
                    WorkbenchError::SessionClosed(s.session_id.clone())
                });
            }
            if arm == Arm::ExpertAi && materials.ai_prefill.is_none() {
                return Err(WorkbenchError::MissingAiSheet(format!("{task} prefill for {citation_id}")));
            }
            let session = ExtractionSession {
                session_id: format!("{project_id}~e{:05}", state.extraction.len() + 1),
                citation_id: citation_id.into(),
                review_id: study.review_id.clone(),
                task,
                participant_id: participant_id.into(),
                arm,
                started_at: now,
                submission: None,
                corrections: Vec::new(),
            };
            let id = session.session_id.clone();
            store.append(Event::ExtractionOpened { session })?;
            extraction_view(store.state(), &id)
        })
    }

    pub fn extraction_view(&self, session_id: &str) -> Result<ExtractionView, WorkbenchError> {
        let shared = self.project_of_session(session_id)?;
        let store = shared.lock().expect("project lock");
        extraction_view(store.state(), session_id)
    }

    pub fn submit_extraction(&self, session_id: &str, input: SubmitExtraction) -> Result<ExtractionAck, WorkbenchError> {
        let shared = self.project_of_session(session_id)?;
        self.with_store(&shared, |store, now| {
            let state = store.state();
            let session = extraction_session(state, session_id)?;
            if !session.is_open() {
                return Err(WorkbenchError::SessionClosed(session_id.into()));
            }
            let materials = state.config.task_materials(&session.citation_id, session.task).expect("validated task");
            check_submitted_record(&input.record, session.task, materials)?;
            let elapsed = elapsed_seconds(session.started_at, now);
            if elapsed <= 0.0 {
                return Err(WorkbenchError::InvalidInput("submitted at the instant the session opened".into()));
            }
            let submission = ExtractionSubmission {
                record: input.record,
                submitted_at: now,
                elapsed_seconds: elapsed,
                client_elapsed_seconds: input.client_elapsed_seconds,
            };
            store.append(Event::ExtractionSubmitted { session_id: session_id.into(), submission })?;
            Ok(ExtractionAck { session_id: session_id.into(), elapsed_seconds: elapsed })
        })
    }

    pub fn correct_extraction(&self, session_id: &str, record: ExtractionRecord, reason: &str) -> Result<(), WorkbenchError> {
        if reason.trim().is_empty() {
            return Err(WorkbenchError::InvalidInput("a correction needs a reason".into()));
        }
        let shared = self.project_of_session(session_id)?;
        self.with_store(&shared, |store, now| {
            let state = store.state();
            let session = extraction_session(state, session_id)?;
            if session.is_open() {
                return Err(WorkbenchError::InvalidInput(format!("session {session_id} is not submitted yet")));
            }
            let materials = state.config.task_materials(&session.citation_id, session.task).expect("validated task");
            check_submitted_record(&record, session.task, materials)?;
            let correction = ExtractionCorrection { record, corrected_at: now, reason: reason.into() };
            store.append(Event::ExtractionCorrected { session_id: session_id.into(), correction })
        })
    }

    /// Per-arm quality and time, savings and the score-band matrix.
    pub async fn report(&self, project_id: &str) -> Result<ArmComparison, WorkbenchError> {
        let state = self.state(project_id)?;
        arm_comparison(&state, &self.gateway).await
    }

    /// Submitted sessions serialized as stored, for audits and export.
    pub fn submitted_sessions_json(&self, project_id: &str) -> Result<String, WorkbenchError> {
        let state = self.state(project_id)?;
        let screening: Vec<&ScreeningSession> = state.screening.values().filter(|s| !s.is_open()).collect();
        let extraction: Vec<&ExtractionSession> = state.extraction.values().filter(|s| !s.is_open()).collect();
        Ok(serde_json::to_string(&serde_json::json!({ "screening": screening, "extraction": extraction }))
            .expect("sessions serialize"))
    }

    /// Writes a snapshot of every project now.
    pub fn snapshot_all(&self) -> Result<(), WorkbenchError> {
        for shared in self.projects.read().expect("project map lock").values() {
            shared.lock().expect("project lock").snapshot()?;
        }
        Ok(())
    }
}

fn summarize(state: &ProjectState) -> ProjectSummary {
    let c = &state.config;
    ProjectSummary {
        project_id: c.project_id.clone(),
        topic_area: c.topic_area.clone(),
        reviews: c.reviews.iter().map(|r| r.review_id.clone()).collect(),
        participants: c.participants.clone(),
        assignments: state.assignments.clone(),
        extraction_tasks_per_participant: c.extraction_studies.iter().map(|s| s.tasks.len()).sum(),
    }
}

fn screening_session<'a>(state: &'a ProjectState, id: &str) -> Result<&'a ScreeningSession, WorkbenchError> {
    state.screening.get(id).ok_or_else(|| WorkbenchError::NotFound(format!("session {id}")))
}

fn extraction_session<'a>(state: &'a ProjectState, id: &str) -> Result<&'a ExtractionSession, WorkbenchError> {
    state.extraction.get(id).ok_or_else(|| WorkbenchError::NotFound(format!("session {id}")))
}

fn check_decisions(
    session: &ScreeningSession,
    input: &SubmitDecisions,
    cap: usize,
    now: DateTime<Utc>,
) -> Result<Vec<Decision>, WorkbenchError> {
    let candidates: HashSet<&str> = session.candidates.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    for d in &input.decisions {
        if !candidates.contains(d.citation_id.as_str()) {
            return Err(WorkbenchError::InvalidInput(format!("{} is not a candidate of this session", d.citation_id)));
        }
        if !seen.insert(d.citation_id.as_str()) {
            return Err(WorkbenchError::DuplicateDecision(d.citation_id.clone()));
        }
    }
    if !input.partial && seen.len() != candidates.len() {
        return Err(WorkbenchError::InvalidInput(format!(
            "{} of {} candidates decided; set partial to submit fewer",
            seen.len(),
            candidates.len()
        )));
    }
    let selected = input.decisions.iter().filter(|d| d.verdict == Verdict::Include).count();
    if selected > cap {
        return Err(WorkbenchError::SelectionCapExceeded { selected, cap });
    }
    Ok(input
        .decisions
        .iter()
        .map(|d| Decision { citation_id: d.citation_id.clone(), verdict: d.verdict, decided_at: now })
        .collect())
}

fn screening_view(state: &ProjectState, session_id: &str) -> Result<ScreeningView, WorkbenchError> {
    let session = screening_session(state, session_id)?;
    let review = state.config.review(&session.review_id).expect("validated review");
    let cards: BTreeMap<&str, &CandidateCard> = review.candidates.iter().map(|c| (c.citation_id.as_str(), c)).collect();
    let ai_sheet = match session.arm {
        Arm::ExpertOnly => None,
        Arm::ExpertAi => Some(build_ai_sheet(review)?),
    };
    Ok(ScreeningView {
        session_id: session.session_id.clone(),
        review_id: session.review_id.clone(),
        participant_id: session.participant_id.clone(),
        arm: session.arm,
        candidates: session.candidates.iter().map(|id| cards[id.as_str()].clone()).collect(),
        max_selections: state.config.max_selections,
        started_at: session.started_at,
        submitted: !session.is_open(),
        decisions: session.effective().map(|(d, _)| d.to_vec()),
        ai_sheet,
    })
}

fn extraction_view(state: &ProjectState, session_id: &str) -> Result<ExtractionView, WorkbenchError> {
    let session = extraction_session(state, session_id)?;
    let study = state.config.study(&session.citation_id).expect("validated study");
    let materials = state.config.task_materials(&session.citation_id, session.task).expect("validated task");
    Ok(ExtractionView {
        session_id: session.session_id.clone(),
        citation_id: session.citation_id.clone(),
        task: session.task,
        participant_id: session.participant_id.clone(),
        arm: session.arm,
        document: study.document.clone(),
        fields: if session.task == ExtractionTask::StudyCharacteristics { characteristic_fields(materials) } else { Vec::new() },
        started_at: session.started_at,
        submitted: !session.is_open(),
        submitted_record: session.effective_record().cloned(),
        ai_prefill: match session.arm {
            Arm::ExpertOnly => None,
            Arm::ExpertAi => materials.ai_prefill.clone(),
        },
    })
}
