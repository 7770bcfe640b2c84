mod config;
mod workbench;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use litmine::eval::{
    adjudicate, evaluate_extraction, evaluate_retrieval, load_verdicts, mean_recall_curve, write_reports, Axis, Curve,
    ExtractionCase, RetrievalCase, SoftMatchConfig, TaskReport, K,
};
use litmine::extraction::{
    audit_no_fabrication, default_characteristic_fields, extract_arm_design, extract_participant_statistics,
    extract_study_characteristics, extract_trial_results, prepare_document, ExtractionRecord, ExtractionTask, FieldSpec,
    MeasureSpec, OutcomeSpec, DEFAULT_MAX_DOCUMENT_TOKENS,
};
use litmine::gateway::Gateway;
use litmine::instruct::{build_corpus, corpus_stats, extract_pico, validate_corpus, CorpusInputs, ReviewTopic, SearchBuildOptions};
use litmine::query::{
    ensemble_search, format_query_file, generate_search_query, parse_query_file, validate_query, GenerationRun,
    QueryFileEntry, SearchOptions, DEFAULT_ENSEMBLE_RUNS, RECALL_THRESHOLD,
};
use litmine::registry::{link_citation_to_trial, PublicationCitation, PublicationRegistry, SEARCH_EVAL_LIMIT};
use litmine::screening::{rank_with, Pico, Ranker};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing_subscriber::EnvFilter;

use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "litmine", version, about = "Literature search, screening, extraction and evaluation")]
struct Cli {
    /// TOML configuration for the model gateway and registries.
    #[arg(long, global = true, env = "LITMINE_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate, validate and ensemble Boolean search queries.
    #[command(subcommand)]
    Query(QueryCmd),
    /// Rank candidate citations for each review.
    Screen(ScreenArgs),
    /// Extract one record from one citation.
    Extract(ExtractArgs),
    /// Build and inspect the instruction corpus.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Score search, screening and extraction output.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run the offline golden pipeline fixture.
    Golden {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reviewer workbench: HTTP server and headless commands.
    Workbench {
        /// Directory holding one event log per project.
        #[arg(long)]
        root: PathBuf,
        #[command(subcommand)]
        command: workbench::WorkbenchCmd,
    },
}

#[derive(Debug, Args)]
struct ReviewSelection {
    /// Review topics as a JSON array or JSON lines.
    #[arg(long)]
    reviews: PathBuf,
    /// Restrict to these review ids.
    #[arg(long)]
    only: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum QueryCmd {
    /// Generate one Boolean query per review and write a query file.
    Gen {
        #[command(flatten)]
        sel: ReviewSelection,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a query file and report recall against each review's included studies.
    Validate {
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        sel: ReviewSelection,
        #[arg(long, default_value_t = RECALL_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = SEARCH_EVAL_LIMIT)]
        limit: usize,
    },
    /// Union the results of several sampled queries.
    Ensemble {
        #[command(flatten)]
        sel: ReviewSelection,
        #[arg(long, default_value_t = DEFAULT_ENSEMBLE_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = SEARCH_EVAL_LIMIT)]
        limit: usize,
    },
}

#[derive(Debug, Args)]
struct ScreenArgs {
    #[command(flatten)]
    sel: ReviewSelection,
    /// JSON object mapping review id to candidate citation ids.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long, default_value = "criterion_llm", value_parser = parse_enum::<Ranker>)]
    ranker: Ranker,
    /// Writes `{review}.jsonl` here.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(value_parser = parse_enum::<ExtractionTask>)]
    task: ExtractionTask,
    #[arg(long)]
    citation: String,
    /// JSON list of field specs; defaults to the standard characteristics.
    #[arg(long)]
    fields: Option<PathBuf>,
    /// JSON measure spec (definition, parameter type, unit and groups) for
    /// participant statistics.
    #[arg(long, alias = "measure")]
    groups: Option<PathBuf>,
    /// JSON outcome spec for trial results.
    #[arg(long)]
    outcome: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum CorpusCmd {
    /// Build the instruction corpus and write it to `--out`.
    Build {
        #[arg(long)]
        reviews: PathBuf,
        /// JSON list of `{citation_id, trial_id}`. Without it, included
        /// citations are linked to trials through their registry ids.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = litmine::instruct::POOL_CAPACITY)]
        pool_capacity: usize,
    },
    /// Datum counts per task and split.
    Stats {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Check split disjointness and leakage; fails on any violation.
    Validate {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Recall@N and Recall@K over search results (JSON lines of cases).
    Search {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@10, Recall@20 and a recall curve over ranked lists.
    Screening {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Field accuracy of predicted records against gold (JSON lines).
    Extraction {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = litmine::eval::SOFT_MATCH_THRESHOLD)]
        threshold: f64,
        /// Require similarity strictly above the threshold.
        #[arg(long)]
        strict: bool,
    },
    /// Majority vote over annotator verdicts.
    Adjudicate {
        #[arg(long)]
        verdicts: PathBuf,
    },
}

/// Parses a CLI string as the serde form of a unit enum variant.
pub(crate) fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// A JSON array or one JSON value per line.
fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn load_reviews(sel: &ReviewSelection) -> Result<Vec<ReviewTopic>> {
    let mut reviews: Vec<ReviewTopic> = read_records(&sel.reviews)?;
    if !sel.only.is_empty() {
        let wanted: BTreeSet<&str> = sel.only.iter().map(String::as_str).collect();
        reviews.retain(|r| wanted.contains(r.review_id.as_str()));
        if reviews.len() != wanted.len() {
            bail!("some of {:?} are not in {}", sel.only, sel.reviews.display());
        }
    }
    Ok(reviews)
}

async fn pico_for(review: &ReviewTopic, gateway: &Gateway) -> Result<Pico> {
    match &review.pico {
        Some(p) => Ok(p.clone()),
        None => Ok(extract_pico(review, gateway).await.with_context(|| format!("extracting PICO for {}", review.review_id))?),
    }
}

async fn fetch_one(registry: &dyn PublicationRegistry, id: &str) -> Result<PublicationCitation> {
    let fetched = registry.fetch_citations(&[id.to_string()]).await?;
    fetched.records.into_iter().next().with_context(|| format!("citation {id} not found"))
}

#[derive(Debug, Deserialize)]
struct PairSpec {
    citation_id: String,
    trial_id: String,
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let (config, base) = Config::load(cli.config.as_deref())?;

    match cli.command {
        Command::Query(cmd) => run_query(&config, &base, cmd).await,
        Command::Screen(args) => run_screen(&config, &base, args).await,
        Command::Extract(args) => run_extract(&config, &base, args).await,
        Command::Corpus(cmd) => run_corpus(&config, &base, cmd).await,
        Command::Eval(cmd) => run_eval(&config, &base, cmd).await,
        Command::Golden { fixture, out } => {
            let fixture = litmine::pipeline::Fixture::load(&fixture)?;
            let output = litmine::pipeline::run_golden(&fixture, &out).await?;
            println!("{}", serde_json::to_string_pretty(&output.numbers)?);
            Ok(())
        }
        Command::Workbench { root, command } => workbench::run(&root, config.gateway(&base)?, command).await,
    }
}

async fn run_query(config: &Config, base: &Path, cmd: QueryCmd) -> Result<()> {
    let gateway = config.gateway(base)?;
    match cmd {
        QueryCmd::Gen { sel, out } => {
            let registries = config.registries(base)?;
            let mut entries = Vec::new();
            for review in load_reviews(&sel)? {
                let pico = pico_for(&review, &gateway).await?;
                let bundle = generate_search_query(&pico, &gateway, &GenerationRun::single(&review.review_id)).await?;
                entries.push(QueryFileEntry { id: review.review_id, provenance: bundle.provenance, query: bundle.final_query });
            }
            let text = format_query_file(&entries, registries.publications.dialect())?;
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
        QueryCmd::Validate { queries, sel, threshold, limit } => {
            let registries = config.registries(base)?;
            let reviews: BTreeMap<String, ReviewTopic> =
                load_reviews(&sel)?.into_iter().map(|r| (r.review_id.clone(), r)).collect();
            let text = std::fs::read_to_string(&queries).with_context(|| format!("reading {}", queries.display()))?;
            for entry in parse_query_file(&text, registries.publications.dialect())? {
                let review = reviews.get(&entry.id).with_context(|| format!("query {} has no matching review", entry.id))?;
                let bundle = litmine::query::QueryBundle {
                    population_query: entry.query.clone(),
                    intervention_query: entry.query.clone(),
                    final_query: entry.query,
                    provenance: entry.provenance,
                };
                let options = SearchOptions { limit, date_ceiling: Some(review.publication_date) };
                let v = validate_query(&bundle, &review.included_study_ids, registries.publications.as_ref(), threshold, options)
                    .await?;
                print_json(&json!({"id": entry.id, "recall": v.recall, "accepted": v.accepted, "retrieved": v.retrieved}))?;
            }
        }
        QueryCmd::Ensemble { sel, runs, limit } => {
            let registries = config.registries(base)?;
            for review in load_reviews(&sel)? {
                let pico = pico_for(&review, &gateway).await?;
                let options = SearchOptions { limit, date_ceiling: Some(review.publication_date) };
                let result = ensemble_search(
                    &pico,
                    &review.review_id,
                    &gateway,
                    registries.publications.as_ref(),
                    runs,
                    options,
                    Some(&review.included_study_ids),
                )
                .await?;
                print_json(&json!({"id": review.review_id, "result": result}))?;
            }
        }
    }
    Ok(())
}

async fn run_screen(config: &Config, base: &Path, args: ScreenArgs) -> Result<()> {
    let gateway = config.gateway(base)?;
    let registries = config.registries(base)?;
    let candidates: BTreeMap<String, Vec<String>> = read_json(&args.candidates)?;
    std::fs::create_dir_all(&args.out)?;
    for review in load_reviews(&args.sel)? {
        let ids = candidates.get(&review.review_id).with_context(|| format!("no candidates for {}", review.review_id))?;
        let fetched = registries.publications.fetch_citations(ids).await?;
        if !fetched.unresolved.is_empty() {
            tracing::warn!(review = %review.review_id, unresolved = fetched.unresolved.len(), "some candidates could not be fetched");
        }
        let pico = pico_for(&review, &gateway).await?;
        let ranked = rank_with(args.ranker, &review.review_id, &pico, &fetched.records, &gateway).await?;
        let path = args.out.join(format!("{}.jsonl", review.review_id));
        std::fs::write(&path, ranked.to_jsonl()).with_context(|| format!("writing {}", path.display()))?;
        tracing::info!(review = %review.review_id, ranked = ranked.entries.len(), path = %path.display(), "ranked");
    }
    Ok(())
}

async fn run_extract(config: &Config, base: &Path, args: ExtractArgs) -> Result<()> {
    let gateway = config.gateway(base)?;
    let registries = config.registries(base)?;
    let citation = fetch_one(registries.publications.as_ref(), &args.citation).await?;
    let doc = prepare_document(&citation, DEFAULT_MAX_DOCUMENT_TOKENS)?;
    let subject = args.citation.as_str();
    let (record, raw) = match args.task {
        ExtractionTask::StudyCharacteristics => {
            let fields: Vec<FieldSpec> = match &args.fields {
                Some(p) => read_json(p)?,
                None => default_characteristic_fields(),
            };
            let e = extract_study_characteristics(&doc, &fields, &gateway, subject).await?;
            (ExtractionRecord::StudyCharacteristics(e.record), e.raw_response)
        }
        ExtractionTask::ArmDesign => {
            let e = extract_arm_design(&doc, &gateway, subject).await?;
            (ExtractionRecord::ArmDesign(e.record), e.raw_response)
        }
        ExtractionTask::ParticipantStatistics => {
            let spec: MeasureSpec = read_json(args.groups.as_deref().context("--groups is required for this task")?)?;
            let e = extract_participant_statistics(&doc, &spec, &gateway, subject).await?;
            (ExtractionRecord::ParticipantStatistics(e.record), e.raw_response)
        }
        ExtractionTask::TrialResults => {
            let spec: OutcomeSpec = read_json(args.outcome.as_deref().context("--outcome is required for this task")?)?;
            let e = extract_trial_results(&doc, &spec, &gateway, subject).await?;
            (ExtractionRecord::TrialResults(e.record), e.raw_response)
        }
    };
    let unsupported = audit_no_fabrication(&record, &raw).err().unwrap_or_default();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "citation_id": args.citation,
            "record": record,
            "raw_response": raw,
            "unsupported_values": unsupported,
        }))?
    );
    Ok(())
}

async fn run_corpus(config: &Config, base: &Path, cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Build { reviews, pairs, out, seed, pool_capacity } => {
            let gateway = config.gateway(base)?;
            let registries = config.registries(base)?;
            let reviews: Vec<ReviewTopic> = read_records(&reviews)?;
            let specs: Vec<PairSpec> = match pairs {
                Some(p) => read_records(&p)?,
                None => {
                    let included: Vec<String> = litmine::instruct::all_included(&reviews).into_iter().collect();
                    let fetched = registries.publications.fetch_citations(&included).await?;
                    fetched
                        .records
                        .iter()
                        .filter_map(|c| link_citation_to_trial(c).map(|t| PairSpec { citation_id: c.citation_id.clone(), trial_id: t }))
                        .collect()
                }
            };
            let mut resolved = Vec::with_capacity(specs.len());
            for spec in specs {
                let citation = fetch_one(registries.publications.as_ref(), &spec.citation_id).await?;
                match registries.trials.fetch_trial(&spec.trial_id).await {
                    Ok(trial) => resolved.push((citation, trial)),
                    Err(e) => tracing::warn!(trial = %spec.trial_id, error = %e, "skipping unresolvable trial"),
                }
            }
            let corpus = build_corpus(CorpusInputs {
                reviews,
                pairs: resolved,
                searcher: registries.publications.as_ref(),
                gateway: &gateway,
                seed,
                pool_capacity,
                search: SearchBuildOptions::default(),
            })
            .await?;
            corpus.write(&out)?;
            println!("{}", serde_json::to_string_pretty(&corpus.manifest)?);
        }
        CorpusCmd::Stats { dir } => println!("{}", serde_json::to_string_pretty(&corpus_stats(&dir)?)?),
        CorpusCmd::Validate { dir } => println!("{}", serde_json::to_string_pretty(&validate_corpus(&dir)?)?),
    }
    Ok(())
}

const SCREENING_CURVE: [usize; 10] = [5, 10, 15, 20, 25, 30, 35, 40, 45, 50];

async fn run_eval(config: &Config, base: &Path, cmd: EvalCmd) -> Result<()> {
    let report = match cmd {
        EvalCmd::Search { cases, out } => {
            let cases: Vec<RetrievalCase> = read_records(&cases)?;
            let metrics = evaluate_retrieval("search", &cases, &[K::Fixed(SEARCH_EVAL_LIMIT), K::Auto])?
                .into_iter()
                .map(|m| m.stratified(Axis::TruthCountBin))
                .collect::<Result<_, _>>()?;
            (out, TaskReport { task: "search".into(), metrics, curves: Vec::new() })
        }
        EvalCmd::Screening { cases, out } => {
            let cases: Vec<RetrievalCase> = read_records(&cases)?;
            let metrics = evaluate_retrieval("screening", &cases, &[K::Fixed(10), K::Fixed(20)])?
                .into_iter()
                .map(|m| m.stratified(Axis::TruthCountBin))
                .collect::<Result<_, _>>()?;
            let curve = Curve { name: "mean_recall".into(), points: mean_recall_curve(&cases, &SCREENING_CURVE)? };
            (out, TaskReport { task: "screening".into(), metrics, curves: vec![curve] })
        }
        EvalCmd::Extraction { predictions, gold, out, threshold, strict } => {
            let gateway = config.gateway(base)?;
            let preds: Vec<ExtractionCase> = read_records(&predictions)?;
            let gold: Vec<ExtractionCase> = read_records(&gold)?;
            let soft = SoftMatchConfig { threshold, inclusive: !strict };
            let (metric, outcomes) = evaluate_extraction("extraction", &preds, &gold, &gateway, soft).await?;
            std::fs::create_dir_all(&out)?;
            let lines: String = outcomes.iter().map(|o| serde_json::to_string(o).map(|s| s + "\n")).collect::<Result<_, _>>()?;
            std::fs::write(out.join("extraction_fields.jsonl"), lines)?;
            (out, TaskReport { task: "extraction".into(), metrics: vec![metric], curves: Vec::new() })
        }
        EvalCmd::Adjudicate { verdicts } => {
            for item in adjudicate(&load_verdicts(&verdicts)?)? {
                print_json(&item)?;
            }
            return Ok(());
        }
    };
    let (out, report) = report;
    std::fs::create_dir_all(&out)?;
    for path in write_reports(&out, &report)? {
        tracing::info!(path = %path.display(), "wrote");
    }
    for m in &report.metrics {
        println!("{}\t{}\t{:.4}", m.task, m.metric, m.mean());
    }
    Ok(())
}
