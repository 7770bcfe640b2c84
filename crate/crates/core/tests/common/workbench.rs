//! Synthetic workbench projects.

use std::collections::BTreeSet;
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use litmine::extraction::{ExtractionRecord, ExtractionTask};
use litmine::gateway::{Gateway, MockBackend};
use litmine::screening::{CriterionAssessment, Label, RankedEntry, RankedList, Ranker};
use litmine::workbench::{
    CandidateCard, ExtractionStudy, ExtractionTaskMaterials, ManualClock, ProjectConfig, ReviewMaterials, Workbench,
};
use serde_json::json;

/// Text planted in every AI-derived field so leaks are easy to find.
pub const AI_MARKER: &str = "AIREF";

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 1, 9, 0, 0).unwrap()
}

pub fn candidate_id(review: &str, n: usize) -> String {
    format!("{review}-c{n:02}")
}

/// 30 candidates; the first 10 are the ground truth. AI scores fall with n.
pub fn review_materials(review_id: &str) -> ReviewMaterials {
    let candidates = (0..30)
        .map(|n| CandidateCard {
            citation_id: candidate_id(review_id, n),
            title: format!("Trial {n} for {review_id}"),
            abstract_text: "Adults were randomized to the study drug or placebo.".into(),
        })
        .collect();
    let entries = (0..30)
        .rev()
        .map(|n| RankedEntry {
            citation_id: candidate_id(review_id, n),
            score: 1.0 - n as f64 / 15.0,
            assessments: vec![CriterionAssessment {
                criterion_id: "P1".into(),
                label: if n < 10 { Label::Yes } else { Label::No },
                rationale: format!("{AI_MARKER} rationale {n}"),
            }],
            failed: false,
            error: None,
        })
        .collect();
    ReviewMaterials {
        review_id: review_id.into(),
        title: format!("Review {review_id}"),
        candidates,
        ground_truth: (0..10).map(|n| candidate_id(review_id, n)).collect::<BTreeSet<_>>(),
        ai_sheet: Some(RankedList { review_id: review_id.into(), ranker: Ranker::CriterionLlm, entries }),
    }
}

pub fn characteristics(study_type: &str, enrollment: f64) -> ExtractionRecord {
    serde_json::from_value(json!({
        "task": "study_characteristics",
        "record": {"conditions": ["Stroke"], "interventions": ["Aspirin"], "enrollment": enrollment, "study_type": study_type}
    }))
    .unwrap()
}

pub fn record(task: ExtractionTask, tag: &str) -> ExtractionRecord {
    let value = match task {
        ExtractionTask::StudyCharacteristics => return characteristics(&format!("{tag} interventional"), 120.0),
        ExtractionTask::ArmDesign => json!({
            "task": "arm_design",
            "record": {"arms": [{"label": format!("{tag} aspirin"), "arm_type": "Experimental", "description": "", "intervention_names": ["Aspirin"]}]}
        }),
        ExtractionTask::ParticipantStatistics => json!({
            "task": "participant_statistics",
            "record": {"measure_definition": "Age", "parameter_type": "Mean", "unit": "years",
                "groups": [{"group_id": "G1", "unit": "participants", "value": "60", "definition": "Aspirin"}],
                "results": [{"group_id": "G1", "value": 61.5, "notes": tag}]}
        }),
        ExtractionTask::TrialResults => json!({
            "task": "trial_results",
            "record": {"outcome_definition": "Recurrent stroke", "group_definition": "Aspirin", "parameter_type": "Count",
                "unit": "Participants", "timeframe": "1 year", "denominator_unit": "participants", "denominator_value": 60,
                "results": [{"value": 7, "title": format!("{tag} aspirin")}]}
        }),
    };
    serde_json::from_value(value).unwrap()
}

pub const TASKS: [ExtractionTask; 4] = [
    ExtractionTask::StudyCharacteristics,
    ExtractionTask::ArmDesign,
    ExtractionTask::ParticipantStatistics,
    ExtractionTask::TrialResults,
];

pub fn study(citation_id: &str, review_id: &str) -> ExtractionStudy {
    ExtractionStudy {
        citation_id: citation_id.into(),
        review_id: review_id.into(),
        document: format!("Full text of {citation_id}."),
        tasks: TASKS
            .iter()
            .map(|&task| ExtractionTaskMaterials {
                task,
                ai_prefill: Some(record(task, AI_MARKER)),
                gold: Some(record(task, "gold")),
                fields: Vec::new(),
            })
            .collect(),
    }
}

/// `reviews` reviews R00.., `studies_per_review` extraction studies each.
pub fn project(project_id: &str, reviews: usize, participants: &[&str], studies_per_review: usize) -> ProjectConfig {
    let review_ids: Vec<String> = (0..reviews).map(|r| format!("R{r:02}")).collect();
    ProjectConfig {
        project_id: project_id.into(),
        topic_area: "cardiology".into(),
        participants: participants.iter().map(|p| p.to_string()).collect(),
        reviews: review_ids.iter().map(|r| review_materials(r)).collect(),
        extraction_studies: review_ids
            .iter()
            .flat_map(|r| (0..studies_per_review).map(move |s| study(&format!("{r}-x{s:02}"), r)))
            .collect(),
        seed: 42,
        candidates_per_session: 30,
        max_selections: 10,
        token: None,
    }
}

pub fn open_workbench(root: &std::path::Path) -> (Workbench, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(t0()));
    let gateway = Arc::new(Gateway::mock(MockBackend::echo()));
    (Workbench::open(root, clock.clone(), gateway).unwrap(), clock)
}
