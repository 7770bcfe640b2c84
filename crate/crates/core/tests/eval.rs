mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::scripted_with_embedder;
use indexmap::IndexMap;
use litmine::eval::{
    adjudicate, evaluate_extraction, evaluate_retrieval, match_text, mean_recall_curve, recall_at_k, stratify,
    write_reports, AnnotatorVerdict, Axis, BinEdges, EvalError, ExtractionCase, ItemScore, MatchRule, MetricReport,
    RetrievalCase, SoftMatchConfig, TaskReport, K,
};
use litmine::extraction::{ExtractionRecord, FieldValue, StudyCharacteristics};
use litmine::gateway::{Gateway, MockEmbedder};
use proptest::prelude::*;

const DIM: usize = 256;

fn padded(head: &[f64]) -> Vec<f64> {
    let mut v = head.to_vec();
    v.resize(DIM, 0.0);
    v
}

fn truth(ids: &[&str]) -> BTreeSet<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

fn soft_gateway() -> Gateway {
    let embedder = MockEmbedder::new(DIM)
        .with_vector("gold arm", padded(&[1.0]))
        .with_vector("pred 0.74", padded(&[37.0, 33.0, 6.0, 2.0, 1.0, 1.0]))
        .with_vector("pred 0.75", padded(&[3.0, 2.0, 1.0, 1.0, 1.0]))
        .with_vector("pred 0.76", padded(&[19.0, 16.0, 2.0, 2.0]))
        .with_vector("diabetes", padded(&[1.0]))
        .with_vector("hypertension", padded(&[0.0, 1.0]));
    scripted_with_embedder(&[], embedder)
}

fn oracle_recall(ranked: &[String], truth: &BTreeSet<String>, k: usize) -> f64 {
    let mut hits = BTreeSet::new();
    for id in ranked.iter().take(k) {
        if truth.contains(id) {
            hits.insert(id.clone());
        }
    }
    hits.len() as f64 / truth.len() as f64
}

#[test]
fn recall_examples() {
    let ranked: Vec<String> = ["a", "x", "b", "y", "c"].iter().map(|s| s.to_string()).collect();
    let t = truth(&["a", "b", "c", "d"]);
    assert_eq!(recall_at_k(&ranked, &t, K::Fixed(1)).unwrap(), 0.25);
    assert_eq!(recall_at_k(&ranked, &t, K::Fixed(3)).unwrap(), 0.5);
    assert_eq!(recall_at_k(&ranked, &t, K::Fixed(100)).unwrap(), 0.75);
    assert_eq!(recall_at_k(&ranked, &t, K::Auto).unwrap(), 0.5);
    assert!(matches!(recall_at_k(&ranked, &BTreeSet::new(), K::Fixed(3)), Err(EvalError::EmptyGroundTruth)));
    assert!(matches!(recall_at_k(&ranked, &t, K::Fixed(0)), Err(EvalError::InvalidK)));
    let repeated: Vec<&str> = vec!["a", "a", "a"];
    assert_eq!(recall_at_k(&repeated, &t, K::Fixed(3)).unwrap(), 0.25);
}

proptest! {
    #[test]
    fn recall_matches_oracle_and_grows_with_k(
        ranked in prop::collection::vec(0u8..40, 0..60),
        truth_ids in prop::collection::btree_set(0u8..40, 1..15),
        k in 1usize..80,
    ) {
        let ranked: Vec<String> = ranked.iter().map(|n| format!("s{n}")).collect();
        let t: BTreeSet<String> = truth_ids.iter().map(|n| format!("s{n}")).collect();
        let r = recall_at_k(&ranked, &t, K::Fixed(k)).unwrap();
        prop_assert_eq!(r, oracle_recall(&ranked, &t, k));
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!(recall_at_k(&ranked, &t, K::Fixed(k + 1)).unwrap() >= r);
    }
}

#[test]
fn retrieval_reports_per_cutoff() {
    let cases = vec![
        RetrievalCase { review_id: "R1".into(), ranked: vec!["a".into(), "b".into()], truth: truth(&["a"]), topic: Some("cardio".into()) },
        RetrievalCase { review_id: "R2".into(), ranked: vec!["x".into(), "c".into()], truth: truth(&["c", "d"]), topic: Some("onco".into()) },
    ];
    let reports = evaluate_retrieval("screening", &cases, &[K::Fixed(1), K::Fixed(2), K::Auto]).unwrap();
    let means: Vec<(String, f64)> = reports.iter().map(|r| (r.metric.clone(), r.mean())).collect();
    assert_eq!(
        means,
        vec![("recall@1".into(), 0.5), ("recall@2".into(), 0.75), ("recall@K".into(), 0.75)]
    );
    assert_eq!(mean_recall_curve(&cases, &[1, 2]).unwrap(), vec![(1, 0.5), (2, 0.75)]);
}

#[tokio::test]
async fn soft_match_threshold_is_inclusive() {
    let gw = soft_gateway();
    let rule = MatchRule::soft_text(0.75);
    for (pred, sim, matched) in [("pred 0.74", 0.74, false), ("pred 0.75", 0.75, true), ("pred 0.76", 0.76, true)] {
        let m = match_text(pred, "gold arm", &gw, rule).await.unwrap();
        assert_eq!(m.similarity, sim, "{pred}");
        assert_eq!(m.matched, matched, "{pred}");
        let back = match_text("gold arm", pred, &gw, rule).await.unwrap();
        assert_eq!(back, m);
    }
    let strict = MatchRule { inclusive: false, ..rule };
    assert!(!match_text("pred 0.75", "gold arm", &gw, strict).await.unwrap().matched);
    assert_eq!(match_text("same text", "same text", &gw, rule).await.unwrap().similarity, 1.0);
    assert!(matches!(match_text("", "gold arm", &gw, rule).await, Err(EvalError::InvalidInput(_))));
    assert!(matches!(match_text("a", "b", &gw, MatchRule::soft_text(0.0)).await, Err(EvalError::InvalidInput(_))));
}

fn characteristics(cid: &str, fields: &[(&str, FieldValue)]) -> ExtractionCase {
    let fields: IndexMap<String, FieldValue> = fields.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    ExtractionCase {
        citation_id: cid.into(),
        record: ExtractionRecord::StudyCharacteristics(StudyCharacteristics { fields }),
        topic: Some("endocrine".into()),
        input_length: Some(1500),
    }
}

#[tokio::test]
async fn extraction_accuracy_two_of_three() {
    let gold = vec![characteristics(
        "c1",
        &[
            ("enrollment", FieldValue::Number(250.0)),
            ("study_type", FieldValue::Text("randomized".into())),
            ("conditions", FieldValue::TextList(vec!["diabetes".into()])),
        ],
    )];
    let pred = vec![characteristics(
        "c1",
        &[
            ("enrollment", FieldValue::Text("250".into())),
            ("study_type", FieldValue::Text("randomized".into())),
            ("conditions", FieldValue::TextList(vec!["hypertension".into()])),
            ("extra", FieldValue::Text("ignored".into())),
        ],
    )];
    let (report, outcomes) = evaluate_extraction("study_characteristics", &pred, &gold, &soft_gateway(), SoftMatchConfig::default())
        .await
        .unwrap();
    assert_eq!(outcomes.len(), 3);
    assert_eq!(outcomes.iter().map(|o| o.correct).collect::<Vec<_>>(), vec![true, true, false]);
    assert!((report.mean() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(format!("{:.3}", report.mean()), "0.667");
    assert_eq!(outcomes[2].similarity, Some(0.0));
}

#[tokio::test]
async fn overall_accuracy_weights_every_field_equally() {
    let gold = vec![
        characteristics("c1", &[("enrollment", FieldValue::Number(10.0)), ("age", FieldValue::Number(55.0)), ("study_type", FieldValue::Text("rct".into()))]),
        characteristics("c2", &[("enrollment", FieldValue::Number(20.0)), ("study_type", FieldValue::NotReported)]),
    ];
    let pred = vec![
        characteristics("c1", &[("enrollment", FieldValue::Number(10.0)), ("age", FieldValue::Text("fifty".into())), ("study_type", FieldValue::Text("rct".into()))]),
        characteristics("c2", &[("enrollment", FieldValue::Number(21.0))]),
    ];
    let (report, outcomes) =
        evaluate_extraction("study_characteristics", &pred, &gold, &soft_gateway(), SoftMatchConfig::default()).await.unwrap();
    let numeric = &report.groups["numeric"];
    let text = &report.groups["text"];
    assert_eq!((numeric.count, numeric.mean), (3, Some(1.0 / 3.0)));
    assert_eq!((text.count, text.mean), (2, Some(1.0)));
    let weighted = (numeric.sum + text.sum) / (numeric.count + text.count) as f64;
    assert_eq!(report.mean(), weighted);
    assert_eq!(report.mean(), 0.6);
    assert!(outcomes[1].note.as_deref().unwrap().contains("fifty"));
}

#[tokio::test]
async fn extraction_alignment_errors() {
    let gw = soft_gateway();
    let one = vec![characteristics("c1", &[("enrollment", FieldValue::Number(1.0))])];
    let other = vec![characteristics("c2", &[("enrollment", FieldValue::Number(1.0))])];
    let soft = SoftMatchConfig::default();
    assert!(matches!(evaluate_extraction("t", &[], &one, &gw, soft).await, Err(EvalError::AlignmentError(_))));
    assert!(matches!(evaluate_extraction("t", &one, &[], &gw, soft).await, Err(EvalError::AlignmentError(_))));
    assert!(matches!(evaluate_extraction("t", &one, &other, &gw, soft).await, Err(EvalError::AlignmentError(_))));
    let dup = vec![one[0].clone(), one[0].clone()];
    assert!(matches!(evaluate_extraction("t", &dup, &one, &gw, soft).await, Err(EvalError::AlignmentError(_))));
}

fn item(id: usize, score: f64, truth_count: usize) -> ItemScore {
    ItemScore {
        item_id: format!("R{id}"),
        score,
        topic: Some(["cardio", "onco", "neuro"][id % 3].into()),
        truth_count: Some(truth_count),
        input_length: None,
        group: None,
    }
}

proptest! {
    #[test]
    fn stratification_partitions_items(
        items in prop::collection::vec((0.0f64..=1.0, 0usize..40), 1..50),
    ) {
        let scored: Vec<ItemScore> = items.iter().enumerate().map(|(i, (s, t))| item(i, *s, *t)).collect();
        let report = MetricReport::new("screening", "recall@10", scored.clone()).unwrap();
        let s = stratify(&report, Axis::TruthCountBin, None).unwrap();
        prop_assert_eq!(s.strata.len(), 6);
        prop_assert_eq!(s.strata.iter().map(|st| st.aggregate.count).sum::<usize>(), scored.len());
        let edges = [0usize, 5, 10, 15, 20, 25];
        for (b, st) in s.strata.iter().enumerate() {
            let hi = edges.get(b + 1).copied().unwrap_or(usize::MAX);
            let members: Vec<f64> = scored
                .iter()
                .filter(|i| (edges[b]..hi).contains(&i.truth_count.unwrap()))
                .map(|i| i.score)
                .collect();
            prop_assert_eq!(st.aggregate.count, members.len());
            let mean = (!members.is_empty()).then(|| members.iter().sum::<f64>() / members.len() as f64);
            match (st.aggregate.mean, mean) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
        let by_topic = stratify(&report, Axis::Topic, None).unwrap();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for i in &scored {
            *counts.entry(i.topic.clone().unwrap()).or_default() += 1;
        }
        let got: BTreeMap<String, usize> = by_topic.strata.iter().map(|s| (s.label.clone(), s.aggregate.count)).collect();
        prop_assert_eq!(got, counts);
    }
}

#[test]
fn stratification_edges_and_metadata() {
    let report = MetricReport::new("screening", "recall@10", vec![item(0, 1.0, 3), item(1, 0.0, 25)]).unwrap();
    let s = stratify(&report, Axis::TruthCountBin, None).unwrap();
    let labels: Vec<&str> = s.strata.iter().map(|st| st.label.as_str()).collect();
    assert_eq!(labels, vec!["0-5", "5-10", "10-15", "15-20", "20-25", "25+"]);
    assert_eq!(s.strata[5].aggregate.count, 1);
    assert!(matches!(stratify(&report, Axis::InputLengthBin, None), Err(EvalError::MissingAxisMetadata(_))));
    assert!(matches!(
        stratify(&report, Axis::TruthCountBin, Some(&BinEdges(vec![1, 5]))),
        Err(EvalError::InvalidInput(_))
    ));
}

#[test]
fn reports_are_reproducible_files() {
    let report = MetricReport::new("screening", "recall@10", vec![item(0, 1.0, 3), item(1, 0.5, 12)])
        .unwrap()
        .stratified(Axis::TruthCountBin)
        .unwrap();
    let task = TaskReport { task: "screening".into(), metrics: vec![report], curves: vec![] };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let written = write_reports(a.path(), &task).unwrap();
    write_reports(b.path(), &task).unwrap();
    for path in written {
        let rel = path.strip_prefix(a.path()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{}", rel.display());
    }
    let back: TaskReport = serde_json::from_str(&std::fs::read_to_string(a.path().join("screening.json")).unwrap()).unwrap();
    assert_eq!(back, task);
}

fn verdict(item: &str, who: &str, correct: bool) -> AnnotatorVerdict {
    AnnotatorVerdict { item_id: item.into(), annotator: who.into(), correct }
}

#[test]
fn adjudication_needs_a_strict_majority_of_two() {
    let items = adjudicate(&[
        verdict("a", "x", true),
        verdict("a", "y", true),
        verdict("a", "z", false),
        verdict("b", "x", true),
        verdict("b", "y", false),
        verdict("c", "x", false),
        verdict("d", "x", false),
        verdict("d", "y", false),
    ])
    .unwrap();
    let got: Vec<(&str, Option<bool>, bool)> = items.iter().map(|i| (i.item_id.as_str(), i.verdict, i.flagged)).collect();
    assert_eq!(
        got,
        vec![("a", Some(true), false), ("b", None, true), ("c", None, true), ("d", Some(false), false)]
    );
    assert!(matches!(adjudicate(&[verdict("a", "x", true), verdict("a", "x", false)]), Err(EvalError::InvalidInput(_))));
}
