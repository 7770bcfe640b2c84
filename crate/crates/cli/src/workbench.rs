use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Subcommand;
use litmine::extraction::{ExtractionRecord, ExtractionTask};
use litmine::gateway::Gateway;
use litmine::workbench::{http, ProjectConfig, SubmitDecisions, SubmitExtraction, SystemClock, Workbench};
use serde::Serialize;

use crate::{parse_enum, read_json};

/// Headless counterparts of every HTTP endpoint, plus the server itself.
#[derive(Debug, Subcommand)]
pub enum WorkbenchCmd {
    /// Serve the JSON API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Create a project from a JSON project config.
    CreateProject {
        #[arg(value_name = "PROJECT_JSON")]
        file: PathBuf,
    },
    /// Project summary.
    Project { project: String },
    /// A participant's screening and extraction queue.
    Queue {
        project: String,
        #[arg(long)]
        participant: String,
    },
    /// Start a screening session; the server clock starts now.
    OpenScreening {
        project: String,
        #[arg(long)]
        review: String,
        #[arg(long)]
        participant: String,
    },
    /// Start an extraction session for one study and task.
    OpenExtraction {
        project: String,
        #[arg(long)]
        citation: String,
        #[arg(long, value_parser = parse_enum::<ExtractionTask>)]
        task: ExtractionTask,
        #[arg(long)]
        participant: String,
    },
    ScreeningView { session: String },
    /// AI ranking with rationales; expert_ai sessions only.
    AiSheet { session: String },
    /// Submit decisions from a JSON file shaped like the HTTP body.
    SubmitDecisions { session: String, file: PathBuf },
    /// Supersede a submitted session's decisions, keeping the original.
    CorrectDecisions {
        session: String,
        file: PathBuf,
        #[arg(long)]
        reason: String,
    },
    ExtractionView { session: String },
    /// Submit an extraction record from a JSON file shaped like the HTTP body.
    SubmitExtraction { session: String, file: PathBuf },
    /// Replace a submitted record; the file holds an extraction record.
    CorrectExtraction {
        session: String,
        file: PathBuf,
        #[arg(long)]
        reason: String,
    },
    /// Arm comparison as JSON, or the CSV exports.
    Report {
        project: String,
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        time_bins: bool,
    },
    /// Write a snapshot of every project.
    Snapshot,
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub async fn run(root: &Path, gateway: Gateway, cmd: WorkbenchCmd) -> Result<()> {
    let wb = Workbench::open(root, Arc::new(SystemClock), Arc::new(gateway))
        .with_context(|| format!("opening workbench at {}", root.display()))?;
    match cmd {
        WorkbenchCmd::Serve { addr } => {
            let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
            tracing::info!(addr = %listener.local_addr()?, root = %root.display(), "workbench listening");
            http::serve(Arc::new(wb), listener).await?;
        }
        WorkbenchCmd::CreateProject { file } => {
            let config: ProjectConfig = read_json(&file)?;
            print(&wb.create_project(config)?)?;
        }
        WorkbenchCmd::Project { project } => print(&wb.project_summary(&project)?)?,
        WorkbenchCmd::Queue { project, participant } => print(&wb.queue(&project, &participant)?)?,
        WorkbenchCmd::OpenScreening { project, review, participant } => {
            print(&wb.open_screening_session(&project, &review, &participant)?)?
        }
        WorkbenchCmd::OpenExtraction { project, citation, task, participant } => {
            print(&wb.open_extraction_session(&project, &citation, task, &participant)?)?
        }
        WorkbenchCmd::ScreeningView { session } => print(&wb.screening_view(&session)?)?,
        WorkbenchCmd::AiSheet { session } => print(&wb.ai_sheet(&session)?)?,
        WorkbenchCmd::SubmitDecisions { session, file } => {
            let input: SubmitDecisions = read_json(&file)?;
            print(&wb.submit_decisions(&session, input)?)?;
        }
        WorkbenchCmd::CorrectDecisions { session, file, reason } => {
            let input: SubmitDecisions = read_json(&file)?;
            print(&wb.correct_decisions(&session, input, &reason)?)?;
        }
        WorkbenchCmd::ExtractionView { session } => print(&wb.extraction_view(&session)?)?,
        WorkbenchCmd::SubmitExtraction { session, file } => {
            let input: SubmitExtraction = read_json(&file)?;
            print(&wb.submit_extraction(&session, input)?)?;
        }
        WorkbenchCmd::CorrectExtraction { session, file, reason } => {
            let record: ExtractionRecord = read_json(&file)?;
            wb.correct_extraction(&session, record, &reason)?;
        }
        WorkbenchCmd::Report { project, csv, time_bins } => {
            let report = wb.report(&project).await?;
            match (csv, time_bins) {
                (_, true) => print!("{}", report.time_bins_csv()),
                (true, false) => print!("{}", report.to_csv()),
                (false, false) => print(&report)?,
            }
        }
        WorkbenchCmd::Snapshot => wb.snapshot_all()?,
    }
    Ok(())
}
