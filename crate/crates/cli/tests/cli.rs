use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/golden")
}

fn litmine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_litmine"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("LITMINE_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = litmine(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Config that replays the golden fixture's scripted replies and registry.
fn golden_config(dir: &Path) -> PathBuf {
    let g = golden_dir();
    let path = dir.join("litmine.toml");
    std::fs::write(
        &path,
        format!(
            "[gateway]\nbackend = \"mock\"\nresponses = {:?}\nmax_attempts = 1\nretry_base_delay_ms = 0\n\n[registry]\nkind = \"fixture\"\ndir = {:?}\n",
            g.join("responses.json"),
            g.join("registry"),
        ),
    )
    .unwrap();
    path
}

#[test]
fn subcommands_match_the_golden_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let config = golden_config(tmp.path());
    let config = config.to_str().unwrap();
    let golden_out = tmp.path().join("golden");
    let numbers: Value =
        serde_json::from_str(&ok(&["golden", "--fixture", golden_dir().to_str().unwrap(), "--out", golden_out.to_str().unwrap()]))
            .unwrap();

    let reviews = golden_dir().join("reviews.json");
    let reviews = reviews.to_str().unwrap();
    let queries = ok(&["--config", config, "query", "gen", "--reviews", reviews]);
    assert_eq!(queries, std::fs::read_to_string(golden_out.join("queries.txt")).unwrap());

    let query_file = tmp.path().join("queries.txt");
    std::fs::write(&query_file, &queries).unwrap();
    let lines = ok(&["--config", config, "query", "validate", "--queries", query_file.to_str().unwrap(), "--reviews", reviews]);
    let recalls: Vec<f64> = lines.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["recall"].as_f64().unwrap()).collect();
    assert_eq!(recalls.len(), 5);
    let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
    assert!((mean - numbers["search.recall@3000"].as_f64().unwrap()).abs() < 1e-12);

    let ranked = tmp.path().join("ranked");
    let candidates = golden_dir().join("candidates.json");
    ok(&[
        "--config",
        config,
        "screen",
        "--reviews",
        reviews,
        "--candidates",
        candidates.to_str().unwrap(),
        "--out",
        ranked.to_str().unwrap(),
    ]);
    for r in ["R01", "R02", "R03", "R04", "R05"] {
        let name = format!("{r}.jsonl");
        assert_eq!(
            std::fs::read(ranked.join(&name)).unwrap(),
            std::fs::read(golden_out.join("ranked").join(&name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn eval_writes_reports_and_adjudicates() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = tmp.path().join("cases.jsonl");
    std::fs::write(
        &cases,
        [
            json!({"review_id": "A", "ranked": ["1", "2", "3"], "truth": ["1", "9"]}),
            json!({"review_id": "B", "ranked": ["5", "6"], "truth": ["6"]}),
        ]
        .iter()
        .map(|v| v.to_string() + "\n")
        .collect::<String>(),
    )
    .unwrap();
    let out = tmp.path().join("reports");
    let stdout = ok(&["eval", "screening", "--cases", cases.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("screening\trecall@10\t0.7500"), "{stdout}");
    assert!(out.join("screening.json").exists());
    assert!(out.join("plots/screening_recall_curve.csv").exists());

    let verdicts = tmp.path().join("verdicts.jsonl");
    std::fs::write(
        &verdicts,
        "{\"item_id\":\"x\",\"annotator\":\"a\",\"correct\":true}\n{\"item_id\":\"x\",\"annotator\":\"b\",\"correct\":true}\n{\"item_id\":\"x\",\"annotator\":\"c\",\"correct\":false}\n",
    )
    .unwrap();
    let item: Value = serde_json::from_str(ok(&["eval", "adjudicate", "--verdicts", verdicts.to_str().unwrap()]).trim()).unwrap();
    assert_eq!(item["verdict"], json!(true));
}

fn review(id: &str) -> Value {
    json!({
        "review_id": id,
        "candidates": (0..4).map(|n| json!({"citation_id": format!("{id}-c{n}"), "title": format!("Trial {n}")})).collect::<Vec<_>>(),
        "ground_truth": [format!("{id}-c0")],
    })
}

#[test]
fn headless_workbench_session() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("wb");
    let root = root.to_str().unwrap();
    let project = tmp.path().join("project.json");
    std::fs::write(
        &project,
        json!({
            "project_id": "demo",
            "participants": ["p1"],
            "reviews": [review("RA"), review("RB")],
            "candidates_per_session": 4,
            "max_selections": 2,
        })
        .to_string(),
    )
    .unwrap();
    ok(&["workbench", "--root", root, "create-project", project.to_str().unwrap()]);
    let again = litmine(&["workbench", "--root", root, "create-project", project.to_str().unwrap()]);
    assert!(!again.status.success());

    let queue: Value = serde_json::from_str(&ok(&["workbench", "--root", root, "queue", "demo", "--participant", "p1"])).unwrap();
    let items = queue["screening"].as_array().unwrap();
    let arm_of = |arm: &str| items.iter().find(|i| i["arm"] == arm).unwrap()["review_id"].as_str().unwrap().to_string();
    let (plain, assisted) = (arm_of("expert_only"), arm_of("expert_ai"));

    let missing_sheet = litmine(&["workbench", "--root", root, "open-screening", "demo", "--review", &assisted, "--participant", "p1"]);
    assert!(!missing_sheet.status.success());

    let view: Value = serde_json::from_str(&ok(&[
        "workbench",
        "--root",
        root,
        "open-screening",
        "demo",
        "--review",
        &plain,
        "--participant",
        "p1",
    ]))
    .unwrap();
    let session = view["session_id"].as_str().unwrap();
    assert_eq!(view["candidates"].as_array().unwrap().len(), 4);
    std::thread::sleep(std::time::Duration::from_millis(20));

    let decisions = tmp.path().join("decisions.json");
    std::fs::write(
        &decisions,
        json!({"decisions": [{"citation_id": format!("{plain}-c0"), "verdict": "include"}], "partial": true}).to_string(),
    )
    .unwrap();
    let metrics: Value =
        serde_json::from_str(&ok(&["workbench", "--root", root, "submit-decisions", session, decisions.to_str().unwrap()])).unwrap();
    assert_eq!(metrics["recall"], json!(1.0));
    let twice = litmine(&["workbench", "--root", root, "submit-decisions", session, decisions.to_str().unwrap()]);
    assert!(!twice.status.success());

    // One arm has no submitted session yet, so there is nothing to compare.
    let report = litmine(&["workbench", "--root", root, "report", "demo", "--csv"]);
    assert!(!report.status.success());
    assert!(String::from_utf8_lossy(&report.stderr).contains("insufficient data"));
}
