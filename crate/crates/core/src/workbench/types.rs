use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::extraction::{ExtractionRecord, ExtractionTask, FieldSpec};
use crate::screening::{RankedList, Ranker};

pub const DEFAULT_CANDIDATES: usize = 30;
pub const DEFAULT_MAX_SELECTIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    ExpertOnly,
    ExpertAi,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::ExpertOnly, Arm::ExpertAi];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::ExpertOnly => "expert_only",
            Arm::ExpertAi => "expert_ai",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a participant sees of a candidate without AI assistance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCard {
    pub citation_id: String,
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
}

/// Everything needed to run screening sessions for one review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewMaterials {
    pub review_id: String,
    #[serde(default)]
    pub title: String,
    pub candidates: Vec<CandidateCard>,
    pub ground_truth: BTreeSet<String>,
    /// Precomputed ranking; required before an expert_ai session can open.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_sheet: Option<RankedList>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionTaskMaterials {
    pub task: ExtractionTask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_prefill: Option<ExtractionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<ExtractionRecord>,
    /// Characteristic fields; defaults apply when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldSpec>,
}

/// One study to extract from. Its arm follows the review it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionStudy {
    pub citation_id: String,
    pub review_id: String,
    #[serde(default)]
    pub document: String,
    pub tasks: Vec<ExtractionTaskMaterials>,
}

fn default_candidates() -> usize {
    DEFAULT_CANDIDATES
}

fn default_selections() -> usize {
    DEFAULT_MAX_SELECTIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub project_id: String,
    #[serde(default)]
    pub topic_area: String,
    pub participants: Vec<String>,
    pub reviews: Vec<ReviewMaterials>,
    #[serde(default)]
    pub extraction_studies: Vec<ExtractionStudy>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_candidates")]
    pub candidates_per_session: usize,
    #[serde(default = "default_selections")]
    pub max_selections: usize,
    /// When set, every request for this project must carry it as a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

impl ProjectConfig {
    pub fn review(&self, review_id: &str) -> Option<&ReviewMaterials> {
        self.reviews.iter().find(|r| r.review_id == review_id)
    }

    pub fn study(&self, citation_id: &str) -> Option<&ExtractionStudy> {
        self.extraction_studies.iter().find(|s| s.citation_id == citation_id)
    }

    pub fn task_materials(&self, citation_id: &str, task: ExtractionTask) -> Option<&ExtractionTaskMaterials> {
        self.study(citation_id)?.tasks.iter().find(|t| t.task == task)
    }
}

/// Project as reported to clients: no candidate texts, sheets or gold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSummary {
    pub project_id: String,
    pub topic_area: String,
    pub reviews: Vec<String>,
    pub participants: Vec<String>,
    pub assignments: BTreeMap<String, BTreeMap<String, Arm>>,
    pub extraction_tasks_per_participant: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Include,
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub citation_id: String,
    pub verdict: Verdict,
    pub decided_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionInput {
    pub citation_id: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitDecisions {
    pub decisions: Vec<DecisionInput>,
    /// Allows leaving candidates undecided.
    #[serde(default)]
    pub partial: bool,
    /// Client timer value, stored as advisory only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_elapsed_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningSubmission {
    pub decisions: Vec<Decision>,
    pub submitted_at: DateTime<Utc>,
    pub elapsed_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_elapsed_seconds: Option<f64>,
    pub partial: bool,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningCorrection {
    pub decisions: Vec<Decision>,
    pub corrected_at: DateTime<Utc>,
    pub reason: String,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningSession {
    pub session_id: String,
    pub review_id: String,
    pub participant_id: String,
    pub arm: Arm,
    /// Presentation order.
    pub candidates: Vec<String>,
    pub started_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submission: Option<ScreeningSubmission>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrections: Vec<ScreeningCorrection>,
}

impl ScreeningSession {
    pub fn is_open(&self) -> bool {
        self.submission.is_none()
    }

    /// Latest decisions and recall, corrections included.
    pub fn effective(&self) -> Option<(&[Decision], f64)> {
        let s = self.submission.as_ref()?;
        Some(match self.corrections.last() {
            Some(c) => (&c.decisions, c.recall),
            None => (&s.decisions, s.recall),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitExtraction {
    pub record: ExtractionRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_elapsed_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSubmission {
    pub record: ExtractionRecord,
    pub submitted_at: DateTime<Utc>,
    pub elapsed_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_elapsed_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionCorrection {
    pub record: ExtractionRecord,
    pub corrected_at: DateTime<Utc>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSession {
    pub session_id: String,
    pub citation_id: String,
    pub review_id: String,
    pub task: ExtractionTask,
    pub participant_id: String,
    pub arm: Arm,
    pub started_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submission: Option<ExtractionSubmission>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrections: Vec<ExtractionCorrection>,
}

impl ExtractionSession {
    pub fn is_open(&self) -> bool {
        self.submission.is_none()
    }

    pub fn effective_record(&self) -> Option<&ExtractionRecord> {
        let s = self.submission.as_ref()?;
        Some(self.corrections.last().map_or(&s.record, |c| &c.record))
    }
}

/// One row of the AI reference sheet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiSheetRow {
    pub rank: usize,
    pub citation_id: String,
    pub overall_score: f64,
    pub assessments: Vec<crate::screening::CriterionAssessment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiSheet {
    pub review_id: String,
    pub ranker: Ranker,
    pub rows: Vec<AiSheetRow>,
}

/// A screening session as shown to its participant. The sheet is present
/// only in the expert_ai arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningView {
    pub session_id: String,
    pub review_id: String,
    pub participant_id: String,
    pub arm: Arm,
    pub candidates: Vec<CandidateCard>,
    pub max_selections: usize,
    pub started_at: DateTime<Utc>,
    pub submitted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decisions: Option<Vec<Decision>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_sheet: Option<AiSheet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionView {
    pub session_id: String,
    pub citation_id: String,
    pub task: ExtractionTask,
    pub participant_id: String,
    pub arm: Arm,
    pub document: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldSpec>,
    pub started_at: DateTime<Utc>,
    pub submitted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_record: Option<ExtractionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_prefill: Option<ExtractionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session_id: String,
    pub selections: usize,
    pub recall: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionAck {
    pub session_id: String,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueStatus {
    Pending,
    Open,
    Submitted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreeningQueueItem {
    pub review_id: String,
    pub arm: Arm,
    pub status: QueueStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionQueueItem {
    pub citation_id: String,
    pub task: ExtractionTask,
    pub arm: Arm,
    pub status: QueueStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Queue {
    pub project_id: String,
    pub participant_id: String,
    pub screening: Vec<ScreeningQueueItem>,
    pub extraction: Vec<ExtractionQueueItem>,
}
