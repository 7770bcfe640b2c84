mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::workbench::{candidate_id, characteristics, open_workbench, project, record, t0, AI_MARKER, TASKS};
use litmine::eval::{recall_at_k, K};
use litmine::extraction::{ExtractionRecord, ExtractionTask, FieldValue};
use litmine::workbench::{
    assign_arms, http, Arm, DecisionInput, QueueStatus, SubmitDecisions, SubmitExtraction, Verdict, Workbench,
    WorkbenchError, EVENTS_FILE, SNAPSHOT_FILE,
};
use serde_json::{json, Value};

fn reviews(n: usize) -> Vec<String> {
    (0..n).map(|r| format!("R{r:02}")).collect()
}

fn arms_of(wb: &Workbench, project_id: &str, participant: &str, arm: Arm) -> Vec<String> {
    let summary = wb.project_summary(project_id).unwrap();
    summary.assignments[participant].iter().filter(|(_, a)| **a == arm).map(|(r, _)| r.clone()).collect()
}

/// Includes the given candidate numbers and excludes the rest.
fn decisions(review: &str, include: &[usize]) -> SubmitDecisions {
    SubmitDecisions {
        decisions: (0..30)
            .map(|n| DecisionInput {
                citation_id: candidate_id(review, n),
                verdict: if include.contains(&n) { Verdict::Include } else { Verdict::Exclude },
            })
            .collect(),
        partial: false,
        client_elapsed_seconds: None,
    }
}

#[test]
fn arms_split_half_and_half() {
    let participants = vec!["p1".to_string(), "p2".to_string(), "p3".to_string()];
    let a = assign_arms(&reviews(10), &participants, 7).unwrap();
    for p in &participants {
        let only = a[p].values().filter(|&&x| x == Arm::ExpertOnly).count();
        assert_eq!((only, a[p].len() - only), (5, 5));
    }
    assert_eq!(a, assign_arms(&reviews(10), &participants, 7).unwrap());
    let mut shuffled = reviews(10);
    shuffled.reverse();
    assert_eq!(a, assign_arms(&shuffled, &participants, 7).unwrap());
    assert!((0..10).any(|s| assign_arms(&reviews(10), &participants, s).unwrap() != a));
    assert!(matches!(assign_arms(&reviews(9), &participants, 7), Err(WorkbenchError::UnbalancedAssignment(_))));
    assert!(matches!(assign_arms(&[], &participants, 7), Err(WorkbenchError::UnbalancedAssignment(_))));
}

#[test]
fn project_creation_validates_config() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, _) = open_workbench(dir.path());
    assert!(matches!(wb.create_project(project("odd", 9, &["p1"], 0)), Err(WorkbenchError::UnbalancedAssignment(_))));
    let mut short = project("short", 2, &["p1"], 0);
    short.reviews[0].candidates.pop();
    assert!(matches!(wb.create_project(short), Err(WorkbenchError::InvalidInput(_))));
    wb.create_project(project("ok", 2, &["p1"], 0)).unwrap();
    assert!(matches!(wb.create_project(project("ok", 2, &["p1"], 0)), Err(WorkbenchError::ProjectExists(_))));
}

#[test]
fn screening_order_per_arm() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (wb1, _) = open_workbench(d1.path());
    let (wb2, _) = open_workbench(d2.path());
    wb1.create_project(project("P", 10, &["p1"], 0)).unwrap();
    wb2.create_project(project("P", 10, &["p1"], 0)).unwrap();

    let only = &arms_of(&wb1, "P", "p1", Arm::ExpertOnly)[0];
    let v1 = wb1.open_screening_session("P", only, "p1").unwrap();
    let v2 = wb2.open_screening_session("P", only, "p1").unwrap();
    assert_eq!(v1.candidates, v2.candidates);
    assert!(v1.ai_sheet.is_none());
    let ranked: Vec<String> = (0..30).map(|n| candidate_id(only, n)).collect();
    let shown: Vec<String> = v1.candidates.iter().map(|c| c.citation_id.clone()).collect();
    assert_ne!(shown, ranked);

    let ai = &arms_of(&wb1, "P", "p1", Arm::ExpertAi)[0];
    let v = wb1.open_screening_session("P", ai, "p1").unwrap();
    let shown: Vec<String> = v.candidates.iter().map(|c| c.citation_id.clone()).collect();
    assert_eq!(shown, (0..30).map(|n| candidate_id(ai, n)).collect::<Vec<_>>());
    let sheet = v.ai_sheet.unwrap();
    assert!(sheet.rows.windows(2).all(|w| w[0].overall_score >= w[1].overall_score));
    assert_eq!(sheet.rows.iter().map(|r| r.citation_id.clone()).collect::<Vec<_>>(), shown);

    assert!(matches!(wb1.open_screening_session("P", ai, "p1"), Err(WorkbenchError::SessionAlreadyOpen(_))));
    assert!(matches!(wb1.open_screening_session("P", ai, "nobody"), Err(WorkbenchError::NoAssignment(_))));
    assert!(matches!(wb1.ai_sheet(&v1.session_id), Err(WorkbenchError::Blinded(_))));
}

#[test]
fn expert_ai_session_needs_a_sheet() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, _) = open_workbench(dir.path());
    let mut config = project("P", 2, &["p1"], 0);
    for r in &mut config.reviews {
        r.ai_sheet = None;
    }
    wb.create_project(config).unwrap();
    let ai = &arms_of(&wb, "P", "p1", Arm::ExpertAi)[0];
    assert!(matches!(wb.open_screening_session("P", ai, "p1"), Err(WorkbenchError::MissingAiSheet(_))));
    let only = &arms_of(&wb, "P", "p1", Arm::ExpertOnly)[0];
    assert!(wb.open_screening_session("P", only, "p1").is_ok());
}

#[test]
fn submission_records_recall_and_server_time() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, clock) = open_workbench(dir.path());
    wb.create_project(project("P", 2, &["p1"], 0)).unwrap();
    let review = "R00";
    let view = wb.open_screening_session("P", review, "p1").unwrap();
    assert_eq!(view.started_at, t0());

    let mut dup = decisions(review, &[0]);
    dup.decisions.push(dup.decisions[0].clone());
    assert!(matches!(wb.submit_decisions(&view.session_id, dup), Err(WorkbenchError::DuplicateDecision(_))));
    let mut partial = decisions(review, &[0, 1]);
    partial.decisions.truncate(5);
    assert!(matches!(wb.submit_decisions(&view.session_id, partial.clone()), Err(WorkbenchError::InvalidInput(_))));
    let too_many = decisions(review, &(0..11).collect::<Vec<_>>());
    assert!(matches!(
        wb.submit_decisions(&view.session_id, too_many),
        Err(WorkbenchError::SelectionCapExceeded { selected: 11, cap: 10 })
    ));
    assert!(matches!(wb.submit_decisions(&view.session_id, decisions(review, &[0])), Err(WorkbenchError::InvalidInput(_))));

    clock.advance(chrono::Duration::milliseconds(95_250));
    let mut input = decisions(review, &[0, 1, 2, 3, 4, 5, 6, 7, 20, 21]);
    input.client_elapsed_seconds = Some(120.0);
    let m = wb.submit_decisions(&view.session_id, input).unwrap();
    assert_eq!(m.recall, 0.8);
    assert_eq!(m.selections, 10);
    assert_eq!(m.elapsed_seconds, 95.25);

    let state = wb.state("P").unwrap();
    let s = &state.screening[&view.session_id];
    let sub = s.submission.as_ref().unwrap();
    let span = (sub.submitted_at - s.started_at).num_milliseconds() as f64 / 1000.0;
    assert!((sub.elapsed_seconds - span).abs() < 1.0);
    assert_eq!(sub.client_elapsed_seconds, Some(120.0));
    assert!(sub.decisions.iter().all(|d| d.decided_at >= s.started_at && d.decided_at <= sub.submitted_at));

    let truth = &state.config.reviews[0].ground_truth;
    let selected: Vec<&str> = sub.decisions.iter().filter(|d| d.verdict == Verdict::Include).map(|d| d.citation_id.as_str()).collect();
    assert_eq!(m.recall, recall_at_k(&selected, truth, K::Fixed(selected.len())).unwrap());

    clock.advance_secs(5);
    assert!(matches!(wb.submit_decisions(&view.session_id, decisions(review, &[0])), Err(WorkbenchError::SessionClosed(_))));
    assert!(matches!(wb.open_screening_session("P", review, "p1"), Err(WorkbenchError::SessionClosed(_))));

    let queue = wb.queue("P", "p1").unwrap();
    assert_eq!(queue.screening[0].status, QueueStatus::Submitted);
    assert_eq!(queue.screening[1].status, QueueStatus::Pending);
}

#[test]
fn partial_submissions_are_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, clock) = open_workbench(dir.path());
    wb.create_project(project("P", 2, &["p1"], 0)).unwrap();
    let view = wb.open_screening_session("P", "R01", "p1").unwrap();
    clock.advance_secs(30);
    let mut input = decisions("R01", &[0, 1]);
    input.decisions.truncate(3);
    input.partial = true;
    let m = wb.submit_decisions(&view.session_id, input).unwrap();
    assert_eq!(m.recall, 0.2);
    assert!(wb.state("P").unwrap().screening[&view.session_id].submission.as_ref().unwrap().partial);
}

#[test]
fn submission_at_the_opening_instant_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, _) = open_workbench(dir.path());
    wb.create_project(project("P", 2, &["p1"], 0)).unwrap();
    let view = wb.open_screening_session("P", "R00", "p1").unwrap();
    assert!(matches!(wb.submit_decisions(&view.session_id, decisions("R00", &[0])), Err(WorkbenchError::InvalidInput(_))));
    assert!(wb.state("P").unwrap().screening[&view.session_id].is_open());
}

#[test]
fn extraction_prefill_is_editable() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, clock) = open_workbench(dir.path());
    wb.create_project(project("P", 2, &["p1"], 2)).unwrap();
    let ai = &arms_of(&wb, "P", "p1", Arm::ExpertAi)[0];
    let only = &arms_of(&wb, "P", "p1", Arm::ExpertOnly)[0];
    let cid = format!("{ai}-x00");

    let view = wb.open_extraction_session("P", &cid, ExtractionTask::StudyCharacteristics, "p1").unwrap();
    let prefill = view.ai_prefill.clone().unwrap();
    assert_eq!(view.fields.len(), 4);
    let ExtractionRecord::StudyCharacteristics(mut edited) = prefill.clone() else { panic!("wrong task") };
    edited.fields.insert("enrollment".into(), FieldValue::Number(118.0));
    let edited = ExtractionRecord::StudyCharacteristics(edited);

    let bad = characteristics("x", 1.0);
    let ExtractionRecord::StudyCharacteristics(mut bad) = bad else { unreachable!() };
    bad.fields.insert("study_type".into(), FieldValue::Number(3.0));
    clock.advance_secs(40);
    let err = wb
        .submit_extraction(&view.session_id, SubmitExtraction { record: ExtractionRecord::StudyCharacteristics(bad), client_elapsed_seconds: None })
        .unwrap_err();
    assert!(matches!(err, WorkbenchError::SchemaViolation(_)), "{err:?}");
    let wrong_task = record(ExtractionTask::ArmDesign, "x");
    assert!(matches!(
        wb.submit_extraction(&view.session_id, SubmitExtraction { record: wrong_task, client_elapsed_seconds: None }),
        Err(WorkbenchError::SchemaViolation(_))
    ));

    let ack = wb.submit_extraction(&view.session_id, SubmitExtraction { record: edited.clone(), client_elapsed_seconds: None }).unwrap();
    assert_eq!(ack.elapsed_seconds, 40.0);
    let stored = wb.extraction_view(&view.session_id).unwrap().submitted_record.unwrap();
    assert_eq!(stored, edited);
    assert_ne!(stored, prefill);
    assert!(matches!(
        wb.submit_extraction(&view.session_id, SubmitExtraction { record: edited, client_elapsed_seconds: None }),
        Err(WorkbenchError::SessionClosed(_))
    ));

    let blind = wb.open_extraction_session("P", &format!("{only}-x00"), ExtractionTask::ArmDesign, "p1").unwrap();
    assert!(blind.ai_prefill.is_none());
    assert!(!serde_json::to_string(&blind).unwrap().contains(AI_MARKER));
}

#[test]
fn ninety_studies_make_360_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, _) = open_workbench(dir.path());
    let summary = wb.create_project(project("P", 10, &["p1", "p2"], 9)).unwrap();
    assert_eq!(summary.extraction_tasks_per_participant, 360);
    let queue = wb.queue("P", "p2").unwrap();
    assert_eq!(queue.extraction.len(), 360);
    assert_eq!(queue.extraction.iter().filter(|e| e.arm == Arm::ExpertAi).count(), 180);
    let arms = &summary.assignments["p2"];
    assert!(queue.extraction.iter().all(|e| e.arm == arms[&e.citation_id[..3]]));
}

/// Runs one screening session per review for `p1`, taking the given number
/// of seconds per arm, in review order.
fn run_screening(wb: &Workbench, clock: &litmine::workbench::ManualClock, times: &BTreeMap<Arm, Vec<i64>>, picks: &[usize]) {
    let summary = wb.project_summary("P").unwrap();
    let mut next: BTreeMap<Arm, usize> = BTreeMap::new();
    for (review, arm) in &summary.assignments["p1"] {
        let i = next.entry(*arm).or_default();
        let secs = times[arm][*i];
        *i += 1;
        let view = wb.open_screening_session("P", review, "p1").unwrap();
        clock.advance_secs(secs);
        wb.submit_decisions(&view.session_id, decisions(review, picks)).unwrap();
    }
}

#[tokio::test]
async fn report_reproduces_time_savings() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, clock) = open_workbench(dir.path());
    wb.create_project(project("P", 10, &["p1"], 0)).unwrap();
    assert!(matches!(wb.report("P").await, Err(WorkbenchError::InsufficientData(_))));
    let times = BTreeMap::from([(Arm::ExpertOnly, vec![500, 560, 580, 600, 660]), (Arm::ExpertAi, vec![400, 449, 449, 449, 498])]);
    run_screening(&wb, &clock, &times, &[0, 1, 2, 3, 4, 5, 6, 20, 21, 22]);

    let report = wb.report("P").await.unwrap();
    let s = report.screening.as_ref().unwrap();
    assert_eq!(s.arms[0].mean_time_seconds, 580.0);
    assert_eq!(s.arms[1].mean_time_seconds, 449.0);
    assert!((s.time_savings - 0.226).abs() < 0.001, "{}", s.time_savings);
    assert_eq!(s.time_savings, (580.0 - 449.0) / 580.0);
    assert_eq!(s.arms[0].mean_quality, Some(0.7));
    assert!(report.extraction.is_none());

    let bins: Vec<(Arm, &str, usize)> = s.time_bins.iter().filter(|b| b.sessions > 0).map(|b| (b.arm, b.label.as_str(), b.sessions)).collect();
    assert_eq!(bins, vec![(Arm::ExpertOnly, "360-540", 1), (Arm::ExpertOnly, "540-720", 4), (Arm::ExpertAi, "360-540", 5)]);

    let bands: Vec<(usize, usize)> = report.score_bands.iter().map(|b| (b.in_ground_truth, b.expert_included)).collect();
    assert_eq!(bands.iter().map(|b| b.0).sum::<usize>(), 50);
    assert_eq!(report.score_bands.iter().map(|b| b.in_ground_truth + b.not_in_ground_truth).sum::<usize>(), 150);

    let csv = report.to_csv();
    assert!(csv.lines().next().unwrap().starts_with("kind,arm,sessions"));
    assert_eq!(csv.lines().count(), 3);
}

#[tokio::test]
async fn equal_times_save_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, clock) = open_workbench(dir.path());
    wb.create_project(project("P", 2, &["p1"], 0)).unwrap();
    let times = BTreeMap::from([(Arm::ExpertOnly, vec![300]), (Arm::ExpertAi, vec![300])]);
    run_screening(&wb, &clock, &times, &[0]);
    assert_eq!(wb.report("P").await.unwrap().screening.unwrap().time_savings, 0.0);
}

#[tokio::test]
async fn report_means_match_group_by() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, clock) = open_workbench(dir.path());
    wb.create_project(project("P", 4, &["p1", "p2", "p3"], 1)).unwrap();
    let mut expected: BTreeMap<Arm, Vec<(f64, f64)>> = BTreeMap::new();
    let mut k = 0usize;
    for p in ["p1", "p2", "p3"] {
        for r in 0..4 {
            let review = format!("R{r:02}");
            let arm = wb.project_summary("P").unwrap().assignments[p][&review];
            let view = wb.open_screening_session("P", &review, p).unwrap();
            k += 1;
            let secs = 100 + (k * 37 % 500) as i64;
            let hits = k % 10;
            clock.advance_secs(secs);
            let picks: Vec<usize> = (0..hits).chain(20..20 + (10 - hits)).collect();
            let m = wb.submit_decisions(&view.session_id, decisions(&review, &picks)).unwrap();
            expected.entry(arm).or_default().push((m.recall, secs as f64));
        }
    }
    let s = wb.report("P").await.unwrap().screening.unwrap();
    for a in &s.arms {
        let rows = &expected[&a.arm];
        let n = rows.len() as f64;
        assert_eq!(a.sessions, rows.len());
        assert!((a.mean_quality.unwrap() - rows.iter().map(|r| r.0).sum::<f64>() / n).abs() < 1e-12);
        assert!((a.mean_time_seconds - rows.iter().map(|r| r.1).sum::<f64>() / n).abs() < 1e-12);
    }
}

#[tokio::test]
async fn extraction_accuracy_uses_evaluation_rules() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, clock) = open_workbench(dir.path());
    wb.create_project(project("P", 2, &["p1"], 1)).unwrap();
    for review in ["R00", "R01"] {
        let cid = format!("{review}-x00");
        let view = wb.open_extraction_session("P", &cid, ExtractionTask::StudyCharacteristics, "p1").unwrap();
        clock.advance_secs(60);
        let submitted = record(ExtractionTask::StudyCharacteristics, "gold");
        wb.submit_extraction(&view.session_id, SubmitExtraction { record: submitted, client_elapsed_seconds: None }).unwrap();
    }
    let e = wb.report("P").await.unwrap().extraction.unwrap();
    assert!(e.arms.iter().all(|a| a.mean_quality == Some(1.0) && a.mean_time_seconds == 60.0));
}

#[test]
fn restart_reloads_submitted_sessions_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let before;
    {
        let (wb, clock) = open_workbench(dir.path());
        let wb = wb.with_snapshot_every(3);
        wb.create_project(project("P", 4, &["p1", "p2"], 1)).unwrap();
        for (i, review) in ["R00", "R01", "R02"].iter().enumerate() {
            let view = wb.open_screening_session("P", review, "p1").unwrap();
            clock.advance(chrono::Duration::milliseconds(61_123 + i as i64));
            wb.submit_decisions(&view.session_id, decisions(review, &[0, 3, 25])).unwrap();
        }
        let view = wb.open_extraction_session("P", "R03-x00", ExtractionTask::TrialResults, "p2").unwrap();
        clock.advance_secs(12);
        wb.submit_extraction(&view.session_id, SubmitExtraction { record: record(ExtractionTask::TrialResults, "p2"), client_elapsed_seconds: Some(11.5) })
            .unwrap();
        wb.open_screening_session("P", "R03", "p1").unwrap();
        before = wb.submitted_sessions_json("P").unwrap();
    }
    assert!(dir.path().join("P").join(SNAPSHOT_FILE).exists());

    let (wb, _) = open_workbench(dir.path());
    assert_eq!(wb.project_ids(), vec!["P".to_string()]);
    assert_eq!(wb.submitted_sessions_json("P").unwrap(), before);
    let open = wb.queue("P", "p1").unwrap();
    assert_eq!(open.screening.iter().filter(|s| s.status == QueueStatus::Open).count(), 1);

    std::fs::remove_file(dir.path().join("P").join(SNAPSHOT_FILE)).unwrap();
    let events = dir.path().join("P").join(EVENTS_FILE);
    let mut text = std::fs::read_to_string(&events).unwrap();
    text.push_str("{\"seq\": 99, \"event\": {\"ScreeningSub");
    std::fs::write(&events, text).unwrap();
    let (wb, _) = open_workbench(dir.path());
    assert_eq!(wb.submitted_sessions_json("P").unwrap(), before);
}

#[test]
fn corrections_supersede_without_rewriting_history() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, clock) = open_workbench(dir.path());
    wb.create_project(project("P", 2, &["p1"], 1)).unwrap();
    let view = wb.open_screening_session("P", "R00", "p1").unwrap();
    clock.advance_secs(100);
    wb.submit_decisions(&view.session_id, decisions("R00", &[0, 1, 20])).unwrap();
    let events = dir.path().join("P").join(EVENTS_FILE);
    let log_before = std::fs::read_to_string(&events).unwrap();

    assert!(matches!(wb.correct_decisions(&view.session_id, decisions("R00", &[0]), " "), Err(WorkbenchError::InvalidInput(_))));
    clock.advance_secs(10);
    let m = wb.correct_decisions(&view.session_id, decisions("R00", &[0, 1, 2, 3]), "misclicked").unwrap();
    assert_eq!(m.recall, 0.4);
    assert_eq!(m.elapsed_seconds, 100.0);

    let log_after = std::fs::read_to_string(&events).unwrap();
    assert!(log_after.starts_with(&log_before));
    assert_eq!(log_after.lines().count(), log_before.lines().count() + 1);
    let session = &wb.state("P").unwrap().screening[&view.session_id];
    assert_eq!(session.submission.as_ref().unwrap().recall, 0.2);
    assert_eq!(session.effective().unwrap().1, 0.4);

    let ev = wb.open_extraction_session("P", "R01-x00", ExtractionTask::ArmDesign, "p1").unwrap();
    assert!(wb.correct_extraction(&ev.session_id, record(ExtractionTask::ArmDesign, "a"), "typo").is_err());
    clock.advance_secs(5);
    wb.submit_extraction(&ev.session_id, SubmitExtraction { record: record(ExtractionTask::ArmDesign, "a"), client_elapsed_seconds: None }).unwrap();
    wb.correct_extraction(&ev.session_id, record(ExtractionTask::ArmDesign, "b"), "typo").unwrap();
    let view = wb.extraction_view(&ev.session_id).unwrap();
    assert_eq!(view.submitted_record.unwrap(), record(ExtractionTask::ArmDesign, "b"));
}

async fn call(client: &reqwest::Client, method: reqwest::Method, url: String, token: Option<&str>, body: Option<Value>) -> (u16, String) {
    let mut req = client.request(method, url);
    if let Some(t) = token {
        req = req.bearer_auth(t);
    }
    if let Some(b) = body {
        req = req.json(&b);
    }
    let resp = req.send().await.unwrap();
    (resp.status().as_u16(), resp.text().await.unwrap())
}

/// Keys or text that only AI output can carry.
fn leaks(body: &str) -> Vec<&'static str> {
    ["ai_sheet", "ai_prefill", "overall_score", "assessments", "rationale", "score", AI_MARKER]
        .into_iter()
        .filter(|k| body.contains(k))
        .collect()
}

#[tokio::test]
async fn http_api_blinds_expert_only_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let (wb, clock) = open_workbench(dir.path());
    let wb = Arc::new(wb);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(http::serve(wb.clone(), listener));
    let client = reqwest::Client::new();
    let tok = Some("s3cret");
    use reqwest::Method as M;

    let mut config = project("P", 2, &["p1"], 1);
    config.token = Some("s3cret".into());
    let (status, _) = call(&client, M::POST, format!("{base}/projects"), None, Some(serde_json::to_value(&config).unwrap())).await;
    assert_eq!(status, 201);
    assert_eq!(call(&client, M::GET, format!("{base}/projects/P"), None, None).await.0, 401);
    assert_eq!(call(&client, M::GET, format!("{base}/projects/P"), Some("wrong"), None).await.0, 401);

    let only = arms_of(&wb, "P", "p1", Arm::ExpertOnly)[0].clone();
    let ai = arms_of(&wb, "P", "p1", Arm::ExpertAi)[0].clone();
    let open = |review: &str| json!({"review_id": review, "participant_id": "p1"});
    let (status, blind_body) = call(&client, M::POST, format!("{base}/projects/P/sessions/screening"), tok, Some(open(&only))).await;
    assert_eq!(status, 201);
    let blind_id = serde_json::from_str::<Value>(&blind_body).unwrap()["session_id"].as_str().unwrap().to_string();
    let (status, ai_body) = call(&client, M::POST, format!("{base}/projects/P/sessions/screening"), tok, Some(open(&ai))).await;
    assert_eq!(status, 201);
    assert!(ai_body.contains(AI_MARKER) && ai_body.contains("overall_score"));
    let (status, _) = call(&client, M::POST, format!("{base}/projects/P/sessions/screening"), tok, Some(open(&ai))).await;
    assert_eq!(status, 409);

    let ex = json!({"citation_id": format!("{only}-x00"), "task": "trial_results", "participant_id": "p1"});
    let (status, ex_body) = call(&client, M::POST, format!("{base}/projects/P/sessions/extraction"), tok, Some(ex)).await;
    assert_eq!(status, 201);
    let ex_id = serde_json::from_str::<Value>(&ex_body).unwrap()["session_id"].as_str().unwrap().to_string();

    clock.advance_secs(200);
    let body = serde_json::to_value(decisions(&only, &[0, 1, 2])).unwrap();
    let (status, submit_body) = call(&client, M::POST, format!("{base}/sessions/screening/{blind_id}/decisions"), tok, Some(body.clone())).await;
    assert_eq!(status, 200, "{submit_body}");
    let (status, _) = call(&client, M::POST, format!("{base}/sessions/screening/{blind_id}/decisions"), tok, Some(body)).await;
    assert_eq!(status, 409);
    let mut correction = serde_json::to_value(decisions(&only, &[0, 1])).unwrap();
    correction["reason"] = json!("second look");
    let (status, correction_body) = call(&client, M::POST, format!("{base}/sessions/screening/{blind_id}/corrections"), tok, Some(correction)).await;
    assert_eq!(status, 200);
    let rec = serde_json::to_value(SubmitExtraction { record: record(ExtractionTask::TrialResults, "p1"), client_elapsed_seconds: None }).unwrap();
    let (status, ex_submit) = call(&client, M::POST, format!("{base}/sessions/extraction/{ex_id}/submit"), tok, Some(rec)).await;
    assert_eq!(status, 200, "{ex_submit}");

    let (sheet_status, sheet_body) = call(&client, M::GET, format!("{base}/sessions/screening/{blind_id}/ai-sheet"), tok, None).await;
    assert_eq!(sheet_status, 403);
    let mut scanned = vec![
        ("open screening", blind_body),
        ("open extraction", ex_body),
        ("submit", submit_body),
        ("correct", correction_body),
        ("submit extraction", ex_submit),
        ("ai-sheet", sheet_body),
    ];
    for path in [
        format!("/sessions/screening/{blind_id}"),
        format!("/sessions/extraction/{ex_id}"),
        "/projects/P".to_string(),
        "/projects/P/queue?participant_id=p1".to_string(),
    ] {
        let (status, body) = call(&client, M::GET, format!("{base}{path}"), tok, None).await;
        assert_eq!(status, 200, "{path}");
        scanned.push(("get", body));
    }
    for (what, body) in &scanned {
        assert!(leaks(body).is_empty(), "{what} leaks {:?}: {body}", leaks(body));
    }

    let (status, _) = call(&client, M::GET, format!("{base}/projects/P/report"), tok, None).await;
    assert_eq!(status, 422);
    let ai_id = serde_json::from_str::<Value>(&ai_body).unwrap()["session_id"].as_str().unwrap().to_string();
    let (status, _) =
        call(&client, M::POST, format!("{base}/sessions/screening/{ai_id}/decisions"), tok, Some(serde_json::to_value(decisions(&ai, &[0])).unwrap())).await;
    assert_eq!(status, 200);
    let (status, csv) = call(&client, M::GET, format!("{base}/projects/P/report.csv"), tok, None).await;
    assert_eq!(status, 200);
    assert!(csv.starts_with("kind,arm"));
    assert_eq!(call(&client, M::GET, format!("{base}/sessions/screening/P~s99999"), tok, None).await.0, 404);
}

#[test]
fn every_task_has_prefill_and_gold() {
    let config = project("P", 2, &["p1"], 1);
    for s in &config.extraction_studies {
        assert_eq!(s.tasks.iter().map(|t| t.task).collect::<Vec<_>>(), TASKS.to_vec());
    }
}
