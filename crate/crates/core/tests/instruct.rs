mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{citation, date, responding, scripted};
use litmine::gateway::{ChatRequest, TaskKind, TemplateSet};
use litmine::instruct::{
    build_candidate_pool, build_corpus, build_extraction_instructions, build_screening_instructions,
    build_search_instructions, check_pool, extract_pico, split_dataset, split_sizes, validate_corpus, Corpus,
    CorpusInputs, CorpusTask, InstructError, InstructionDatum, PoolQueries, PoolSource, Provenance, RawCounts,
    ReviewTopic, SearchBuildOptions, Split, Thresholds, POOL_CAPACITY,
};
use litmine::registry::{FixtureStore, PublicationCitation, TrialRecord};
use litmine::screening::Pico;
use proptest::prelude::*;
use serde_json::json;

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:04}")).collect()
}

fn review(id: &str, included: &[String], pico: Option<Pico>) -> ReviewTopic {
    ReviewTopic {
        review_id: id.to_string(),
        title: format!("Review {id}"),
        abstract_text: "Background. We assessed aspirin for secondary prevention after ischaemic stroke.".into(),
        pico,
        included_study_ids: included.iter().cloned().collect(),
        publication_date: date(2020, 1, 1),
    }
}

fn stroke_pico() -> Pico {
    Pico::new("adults after ischaemic stroke", "aspirin", Some("placebo"), Some("recurrent stroke")).unwrap()
}

fn tag(req: &ChatRequest) -> (TaskKind, String) {
    let t = req.tag.as_ref().expect("tagged request");
    (t.task, t.subject.clone())
}

fn assessment_reply(labels: &[&str]) -> String {
    let items: Vec<_> = ["P1", "I1", "C1", "O1"]
        .iter()
        .zip(labels)
        .map(|(id, l)| json!({"criterion_id": id, "label": l, "rationale": format!("{id} judged from the abstract")}))
        .collect();
    json!({ "assessments": items }).to_string()
}

// Floor of each quota, then leftover units by descending remainder.
fn oracle_sizes(n: usize) -> [usize; 3] {
    let tenths = [6 * n, 2 * n, 2 * n];
    let mut sizes = tenths.map(|t| t / 10);
    let mut rem: Vec<(usize, usize)> = tenths.iter().enumerate().map(|(i, t)| (t % 10, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = n - sizes.iter().sum::<usize>();
    for (_, i) in rem.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[*i] += 1;
        left -= 1;
    }
    sizes
}

#[test]
fn split_sizes_examples() {
    assert_eq!(split_sizes(10), [6, 2, 2]);
    assert_eq!(split_sizes(21_235), [12_741, 4_247, 4_247]);
    assert_eq!(split_sizes(5), [3, 1, 1]);
    for n in 5..2_000 {
        assert_eq!(split_sizes(n), oracle_sizes(n), "n={n}");
    }
}

#[test]
fn split_is_seeded_and_partitions_reviews() {
    let all = ids("R", 10);
    let a = split_dataset(&all, 7).unwrap();
    assert_eq!((a.train.len(), a.dev.len(), a.test.len()), (6, 2, 2));
    assert_eq!(a, split_dataset(&all, 7).unwrap());
    let mut reversed = all.clone();
    reversed.reverse();
    assert_eq!(a, split_dataset(&reversed, 7).unwrap());
    let seeds_differ = (0..20).any(|s| split_dataset(&all, s).unwrap() != a);
    assert!(seeds_differ);
    assert_eq!(split_dataset(&ids("R", 4), 7), Err(InstructError::TooFewReviews(4)));
}

proptest! {
    #[test]
    fn split_never_leaks(n in 5usize..200, seed in any::<u64>()) {
        let all = ids("R", n);
        let s = split_dataset(&all, seed).unwrap();
        let sizes = oracle_sizes(n);
        prop_assert_eq!([s.train.len(), s.dev.len(), s.test.len()], sizes);
        prop_assert!(s.train.is_disjoint(&s.dev) && s.train.is_disjoint(&s.test) && s.dev.is_disjoint(&s.test));
        let union: BTreeSet<String> = s.train.iter().chain(&s.dev).chain(&s.test).cloned().collect();
        prop_assert_eq!(union, all.into_iter().collect::<BTreeSet<_>>());
    }
}

#[tokio::test]
async fn pico_from_review_abstract() {
    let r = review("R1", &ids("s", 1), None);
    let reply = r#"```json
{"population": "adults after ischaemic stroke", "intervention": "aspirin", "comparison": "placebo", "outcome": null}
```"#;
    let (gw, backend) = scripted(&[(TaskKind::PicoExtract, "R1", reply)]);
    let p = extract_pico(&r, &gw).await.unwrap();
    assert_eq!(p.population, "adults after ischaemic stroke");
    assert_eq!(p.intervention, "aspirin");
    assert_eq!(p.comparison.as_deref(), Some("placebo"));
    assert_eq!(p.outcome, None);
    assert_eq!(extract_pico(&r, &gw).await.unwrap(), p);
    assert_eq!(backend.call_count(TaskKind::PicoExtract), 2);

    let mut empty = r.clone();
    empty.abstract_text = "  ".into();
    assert!(matches!(extract_pico(&empty, &gw).await, Err(InstructError::InvalidInput(_))));
}

/// Reviews A and C retrieve 9 of 10 included studies, B retrieves 1 of 10,
/// and D and E have no term replies.
fn search_world() -> (Vec<ReviewTopic>, FixtureStore) {
    let mut pubs = Vec::new();
    let mut reviews = Vec::new();
    for (rid, hits) in [("A", 9), ("B", 1), ("C", 9), ("D", 9), ("E", 9)] {
        let inc = ids(&format!("{rid}-"), 10);
        for (n, id) in inc.iter().enumerate() {
            let (title, body) = if n < hits {
                (format!("Study {id}"), format!("topic{rid} cohort given drug{rid}"))
            } else {
                (format!("Study {id}"), "An unrelated observational report.".to_string())
            };
            pubs.push(citation(id, &title, &body, date(2015, 1, 1)));
        }
        reviews.push(review(rid, &inc, Some(stroke_pico())));
    }
    for n in 0..30 {
        pubs.push(citation(&format!("noise{n}"), "Noise", "Nothing relevant here.", date(2012, 1, 1)));
    }
    (reviews, FixtureStore::new(pubs, []).unwrap())
}

#[tokio::test]
async fn search_targets_keep_only_recall_above_threshold() {
    let (reviews, store) = search_world();
    let (gw, _) = responding(|req| {
        let (_, subject) = tag(req);
        let (cid, facet) = subject.split_once('/').unwrap();
        let rid = &cid[..1];
        if rid == "D" || rid == "E" {
            return String::new();
        }
        match facet {
            "population" => format!("topic{rid}"),
            _ => format!("drug{rid}"),
        }
    });
    let (data, reports) = build_search_instructions(&reviews, &gw, &store, SearchBuildOptions::default()).await;

    let by_id: BTreeMap<&str, _> = reports.iter().map(|r| (r.review_id.as_str(), r)).collect();
    assert_eq!(reports.len(), 5);
    assert_eq!(by_id["A"].recall, Some(0.9));
    assert!(by_id["A"].accepted);
    assert_eq!(by_id["B"].recall, Some(0.1));
    assert!(!by_id["B"].accepted && by_id["B"].error.is_none());
    for failed in ["D", "E"] {
        assert!(by_id[failed].error.is_some() && by_id[failed].recall.is_none());
    }

    let emitted: Vec<&str> = data.iter().map(|d| d.provenance.review_id.as_str()).collect();
    assert_eq!(emitted, vec!["A", "C"]);
    let study_group = |t: &str| vec![format!("(\"{t}\"[tiab])"); 10].join(" OR ");
    assert_eq!(data[0].output, format!("(({}) AND ({}))", study_group("topica"), study_group("druga")));
    assert_eq!(data[0].task, CorpusTask::Search);
    assert!(data[0].input.contains("adults after ischaemic stroke"));
    assert!(data.iter().all(|d| d.validate().is_ok()));
}

#[tokio::test]
async fn search_threshold_is_inclusive() {
    let (reviews, store) = search_world();
    let (gw, _) = responding(|req| {
        let (_, subject) = tag(req);
        let (cid, facet) = subject.split_once('/').unwrap();
        let rid = &cid[..1];
        if facet == "population" { format!("topic{rid}") } else { format!("drug{rid}") }
    });
    let b = &reviews[1..2];
    for (threshold, accepted) in [(0.09, true), (0.1, true), (0.11, false)] {
        let opts = SearchBuildOptions { threshold, ..SearchBuildOptions::default() };
        let (data, reports) = build_search_instructions(b, &gw, &store, opts).await;
        assert_eq!(reports[0].accepted, accepted, "threshold {threshold}");
        assert_eq!(data.len(), usize::from(accepted));
    }
}

/// 120 documents match both PICO facets, 400 only the intervention and 50
/// match but postdate the review. One included study matches nothing.
fn pool_world() -> (ReviewTopic, FixtureStore) {
    let mut pubs = Vec::new();
    for (n, id) in ids("both", 120).iter().enumerate() {
        pubs.push(citation(id, "Stroke trial", "Aspirin after stroke.", date(2000 + (n % 19) as i32, 1, 1)));
    }
    for (n, id) in ids("drug", 400).iter().enumerate() {
        pubs.push(citation(id, "Cardiology trial", "Aspirin in angina.", date(2000 + (n % 19) as i32, 6, 1)));
    }
    for id in ids("late", 50) {
        pubs.push(citation(&id, "Stroke trial", "Aspirin after stroke.", date(2023, 1, 1)));
    }
    pubs.push(citation("target", "Hidden report", "Secondary prevention cohort.", date(2010, 1, 1)));
    let included = vec!["both0000".to_string(), "target".to_string()];
    (review("P", &included, Some(stroke_pico())), FixtureStore::new(pubs, []).unwrap())
}

#[tokio::test]
async fn pool_fills_from_pico_and_injects_missed_targets() {
    let (r, store) = pool_world();
    let queries = PoolQueries::from_pico(r.pico.as_ref().unwrap()).unwrap();
    let pool = build_candidate_pool(&r, &queries, &store, 300).await.unwrap();
    assert_eq!(pool.len(), 300);
    let hits = pool.entries.iter().filter(|e| e.source == PoolSource::SearchHit).count();
    assert_eq!(hits, 120);
    assert_eq!(pool.entries.iter().filter(|e| e.source == PoolSource::PicoFill).count(), 179);
    assert_eq!(pool.injected(), 1);
    assert_eq!(pool.entries.last().unwrap().citation_id, "target");
    assert_eq!(pool.entries.last().unwrap().source, PoolSource::GroundTruthInjected);
    assert!(pool.ids().iter().all(|id| !id.starts_with("late")));
    check_pool(&pool, &r, 300, |id| store.publication(id).map(|c| c.publication_date)).unwrap();
}

#[tokio::test]
async fn pool_truncates_to_capacity_keeping_targets() {
    let mut pubs = Vec::new();
    for (n, id) in ids("m", 2_500).iter().enumerate() {
        pubs.push(citation(id, "Stroke trial", "Aspirin after stroke.", date(1990 + (n % 30) as i32, 1 + (n % 12) as u32, 1)));
    }
    let store = FixtureStore::new(pubs, []).unwrap();
    let mut dated: Vec<_> = store.publications().map(|c| (c.publication_date, c.citation_id.clone())).collect();
    dated.sort();
    let oldest = dated[0].1.clone();
    let newest = dated.last().unwrap().1.clone();
    let r = review("T", &[oldest.clone(), newest.clone()], Some(stroke_pico()));
    let queries = PoolQueries::from_pico(r.pico.as_ref().unwrap()).unwrap();

    let pool = build_candidate_pool(&r, &queries, &store, POOL_CAPACITY).await.unwrap();
    assert_eq!(pool.len(), POOL_CAPACITY);
    let got: BTreeSet<String> = pool.ids().into_iter().collect();
    assert!(got.contains(&oldest) && got.contains(&newest));
    assert_eq!(pool.injected(), 1);
    check_pool(&pool, &r, POOL_CAPACITY, |id| store.publication(id).map(|c| c.publication_date)).unwrap();

    let small = build_candidate_pool(&r, &queries, &store, 10).await.unwrap();
    assert_eq!(small.len(), 10);
    check_pool(&small, &r, 10, |id| store.publication(id).map(|c| c.publication_date)).unwrap();
}

#[tokio::test]
async fn pool_rejects_targets_after_the_review() {
    let (mut r, store) = pool_world();
    r.included_study_ids.insert("late0000".into());
    r.included_study_ids.remove("both0000");
    let queries = PoolQueries::from_pico(r.pico.as_ref().unwrap()).unwrap();
    assert!(matches!(build_candidate_pool(&r, &queries, &store, 300).await, Err(InstructError::InvalidInput(_))));
}

#[tokio::test]
async fn screening_rationales_drop_negative_included_studies() {
    let r = review("S", &["inc1".into(), "inc2".into()], Some(stroke_pico()));
    let cands: Vec<PublicationCitation> = ["inc1", "inc2", "exc1"]
        .iter()
        .map(|id| citation(id, &format!("Trial {id}"), "Randomized trial.", date(2015, 1, 1)))
        .collect();
    let (gw, backend) = scripted(&[
        (TaskKind::RationaleGen, "S/inc1", &assessment_reply(&["YES", "YES", "Partially Yes", "YES"])),
        (TaskKind::RationaleGen, "S/inc2", &assessment_reply(&["NO", "NO", "YES", "UNCERTAIN"])),
        (TaskKind::RationaleGen, "S/exc1", &assessment_reply(&["NO", "NO", "YES", "UNCERTAIN"])),
    ]);
    let (data, stats) = build_screening_instructions(&r, &cands, &gw).await.unwrap();
    assert_eq!((stats.generated, stats.dropped_negative_included, stats.failed, stats.retained), (3, 1, 0, 2));
    let kept: Vec<&str> = data.iter().map(|d| d.provenance.citation_id.as_deref().unwrap()).collect();
    assert_eq!(kept, vec!["inc1", "exc1"]);
    let score = |d: &InstructionDatum| serde_json::from_str::<serde_json::Value>(&d.output).unwrap()["overall_score"].as_f64().unwrap();
    assert_eq!(score(&data[0]), 0.875);
    assert_eq!(score(&data[1]), -0.25);

    let prompts: Vec<String> = backend.transcript().iter().map(|(_, prompt)| prompt.clone()).collect();
    assert!(prompts.iter().any(|p| p.contains("included")));
    assert!(prompts.iter().any(|p| p.contains("excluded")));
    assert!(data.iter().all(|d| !d.input.contains("included") && !d.input.contains("excluded")));
}

fn trial(id: &str, with_flow: bool) -> TrialRecord {
    serde_json::from_value(json!({
        "trial_id": id,
        "title": "Aspirin after stroke",
        "conditions": ["Stroke"],
        "interventions": ["Aspirin"],
        "enrollment": 240,
        "study_type": "Interventional",
        "first_posted": "2012-03-01",
        "arms": [
            {"label": "Aspirin", "arm_type": "Experimental", "description": "100 mg daily", "intervention_names": ["Aspirin"]},
            {"label": "Placebo", "arm_type": "Placebo Comparator", "description": "Matching tablet", "intervention_names": ["Placebo"]}
        ],
        "participant_flow": if with_flow { json!([{
            "measure_definition": "Age", "parameter_type": "Mean", "unit": "years",
            "groups": [{"group_id": "G1", "unit": "participants", "value": "120", "definition": "Aspirin"}],
            "results": [{"group_id": "G1", "value": 67.5, "notes": ""}]
        }]) } else { json!([]) },
        "reported_results": [{
            "outcome_definition": "Recurrent stroke", "group_definition": "Aspirin", "parameter_type": "Count of Participants",
            "unit": "Participants", "timeframe": "12 months", "denominator_unit": "participants", "denominator_value": 120,
            "results": [{"value": 9, "title": "Aspirin"}]
        }],
        "has_results": true
    }))
    .unwrap()
}

fn pair(cid: &str, tid: &str, with_flow: bool) -> (PublicationCitation, TrialRecord) {
    let mut c = citation(cid, "Aspirin after stroke", &format!("Randomized trial {tid}."), date(2014, 1, 1));
    c.full_text = Some("Methods. 240 adults were randomized to aspirin or placebo.".into());
    (c, trial(tid, with_flow))
}

#[test]
fn extraction_data_per_pair() {
    let reviews = vec![review("R2", &["c1".into(), "c2".into()], None), review("R1", &["c2".into()], None)];
    let pairs = vec![pair("c1", "NCT00000001", true), pair("c2", "NCT00000002", false), pair("c9", "NCT00000009", true)];
    let build = build_extraction_instructions(&pairs, &reviews, &TemplateSet::builtin(), 30_000).unwrap();

    let expected: usize = pairs
        .iter()
        .filter(|(c, _)| c.citation_id != "c9")
        .map(|(_, t)| {
            1 + usize::from(!t.arms.is_empty())
                + usize::from(!t.participant_flow.is_empty())
                + usize::from(!t.reported_results.is_empty())
        })
        .sum();
    assert_eq!(build.data.len(), expected);
    assert_eq!(expected, 7);
    let c1: Vec<CorpusTask> = build.data.iter().filter(|d| d.provenance.citation_id.as_deref() == Some("c1")).map(|d| d.task).collect();
    assert_eq!(
        c1,
        vec![CorpusTask::StudyCharacteristics, CorpusTask::ArmDesign, CorpusTask::ParticipantStatistics, CorpusTask::TrialResults]
    );
    assert_eq!(build.shortfalls.len(), 1);
    assert_eq!(build.shortfalls[0].citation_id, "c2");
    assert_eq!(build.shortfalls[0].missing, vec!["participant_statistics".to_string()]);
    assert_eq!(build.unassigned, vec!["c9".to_string()]);

    let owner = |cid: &str| build.data.iter().find(|d| d.provenance.citation_id.as_deref() == Some(cid)).unwrap().provenance.review_id.clone();
    assert_eq!(owner("c1"), "R2");
    assert_eq!(owner("c2"), "R1");

    let chars: serde_json::Value = serde_json::from_str(&build.data[0].output).unwrap();
    assert_eq!(chars["enrollment"], json!(240));
    assert_eq!(chars["conditions"], json!(["Stroke"]));
    let arms: serde_json::Value = serde_json::from_str(&build.data[1].output).unwrap();
    assert_eq!(arms["arms"][1]["label"], "Placebo");
    assert!(build.data[0].input.contains("240 adults were randomized"));
}

fn synthetic_datum(review_id: &str, task: CorpusTask, n: usize) -> InstructionDatum {
    InstructionDatum {
        instruction: "Do the task.".into(),
        input: format!("input {review_id} {n}"),
        output: format!("output {n}"),
        task,
        provenance: Provenance { review_id: review_id.into(), citation_id: Some(format!("c{n}")), trial_id: None },
    }
}

#[test]
fn corpus_round_trips_and_validates() {
    let reviews = ids("R", 10);
    let split = split_dataset(&reviews, 11).unwrap();
    let data: Vec<InstructionDatum> = reviews
        .iter()
        .enumerate()
        .flat_map(|(i, r)| CorpusTask::ALL.iter().enumerate().map(move |(j, t)| synthetic_datum(r, *t, i * 10 + j)))
        .collect();
    let thresholds = Thresholds { recall_threshold: 0.2, search_limit: 3000, pool_capacity: 2000, max_document_tokens: 30_000 };
    let corpus = Corpus::assemble(data, split.clone(), thresholds, RawCounts::default()).unwrap();
    assert_eq!(corpus.total(), 60);

    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();
    assert_eq!(Corpus::load(dir.path()).unwrap(), corpus);
    let stats = validate_corpus(dir.path()).unwrap();
    assert_eq!(stats.total, 60);
    assert_eq!(stats.reviews_per_split["train"], 6);
    assert_eq!(stats.counts["search"]["train"], 6);
    assert_eq!(stats.counts["trial_results"]["dev"], 2);

    for ((_, s), items) in &corpus.data {
        assert!(items.iter().all(|d| split.split_of(&d.provenance.review_id) == Some(*s)));
    }

    let train_review = split.train.iter().next().unwrap();
    let moved = serde_json::to_string(&synthetic_datum(train_review, CorpusTask::Search, 99)).unwrap();
    let test_file = dir.path().join("search").join("test.jsonl");
    let mut text = std::fs::read_to_string(&test_file).unwrap();
    text.push_str(&moved);
    text.push('\n');
    std::fs::write(&test_file, text).unwrap();
    assert!(matches!(validate_corpus(dir.path()), Err(InstructError::Corpus(_))));
}

#[test]
fn assemble_rejects_reviews_outside_the_split() {
    let split = split_dataset(&ids("R", 5), 1).unwrap();
    let stray = synthetic_datum("Z", CorpusTask::Screening, 0);
    let thresholds = Thresholds { recall_threshold: 0.2, search_limit: 3000, pool_capacity: 2000, max_document_tokens: 30_000 };
    assert!(matches!(Corpus::assemble(vec![stray], split, thresholds, RawCounts::default()), Err(InstructError::Corpus(_))));
}

#[tokio::test]
async fn corpus_build_end_to_end() {
    let mut pubs = Vec::new();
    let mut reviews = Vec::new();
    let mut pairs = Vec::new();
    for r in 0..6 {
        let rid = format!("R{r}");
        let inc: Vec<String> = (0..2).map(|k| format!("{rid}-inc{k}")).collect();
        for (k, id) in inc.iter().enumerate() {
            let mut c = citation(id, "Aspirin after ischaemic stroke", "Adults randomized to aspirin.", date(2014, 1, 1));
            c.full_text = Some("Methods. Adults were randomized.".into());
            pubs.push(c.clone());
            if k == 0 {
                let (_, t) = pair(id, &format!("NCT{:08}", r + 1), r % 2 == 0);
                pairs.push((c, t));
            }
        }
        for n in 0..8 {
            pubs.push(citation(&format!("{rid}-bg{n}"), "Stroke cohort", "Aspirin use in stroke.", date(2010, 1, 1)));
        }
        reviews.push(review(&rid, &inc, Some(stroke_pico())));
    }
    let store = FixtureStore::new(pubs, []).unwrap();
    let (gw, _) = responding(|req| {
        let (task, subject) = tag(req);
        match task {
            TaskKind::TermExtract if subject.ends_with("/population") => "stroke".into(),
            TaskKind::TermExtract => "aspirin".into(),
            TaskKind::RationaleGen => assessment_reply(&["YES", "YES", "UNCERTAIN", "PARTIAL"]),
            other => panic!("unexpected {other:?}"),
        }
    });
    let inputs = || CorpusInputs {
        reviews: reviews.clone(),
        pairs: pairs.clone(),
        searcher: &store,
        gateway: &gw,
        seed: 3,
        pool_capacity: 20,
        search: SearchBuildOptions::default(),
    };
    let corpus = build_corpus(inputs()).await.unwrap();
    assert_eq!(corpus, build_corpus(inputs()).await.unwrap());

    let count = |t: CorpusTask| Split::ALL.iter().map(|s| corpus.data.get(&(t, *s)).map_or(0, Vec::len)).sum::<usize>();
    assert_eq!(count(CorpusTask::Search), 6);
    assert_eq!(count(CorpusTask::Screening), 6 * 20);
    assert_eq!(count(CorpusTask::StudyCharacteristics), 6);
    assert_eq!(count(CorpusTask::ParticipantStatistics), 3);
    assert_eq!(corpus.manifest.raw.search_accepted, 6);
    assert_eq!(corpus.manifest.review_splits.len(), 6);

    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();
    let stats = validate_corpus(dir.path()).unwrap();
    assert_eq!(stats.total, corpus.total());
    let mut seen: BTreeMap<String, BTreeSet<Split>> = BTreeMap::new();
    for ((_, s), items) in &corpus.data {
        for d in items {
            seen.entry(d.provenance.review_id.clone()).or_default().insert(*s);
        }
    }
    assert!(seen.values().all(|s| s.len() == 1));
}
