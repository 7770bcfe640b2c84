//! JSON HTTP API over a [`Workbench`].

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use super::*;

impl IntoResponse for WorkbenchError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            WorkbenchError::InvalidInput(_) => (StatusCode::BAD_REQUEST, "invalid_input"),
            WorkbenchError::UnbalancedAssignment(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unbalanced_assignment"),
            WorkbenchError::ProjectExists(_) => (StatusCode::CONFLICT, "project_exists"),
            WorkbenchError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            WorkbenchError::NoAssignment(_) => (StatusCode::NOT_FOUND, "no_assignment"),
            WorkbenchError::SessionAlreadyOpen(_) => (StatusCode::CONFLICT, "session_already_open"),
            WorkbenchError::SessionClosed(_) => (StatusCode::CONFLICT, "session_closed"),
            WorkbenchError::MissingAiSheet(_) => (StatusCode::CONFLICT, "missing_ai_sheet"),
            WorkbenchError::DuplicateDecision(_) => (StatusCode::UNPROCESSABLE_ENTITY, "duplicate_decision"),
            WorkbenchError::SelectionCapExceeded { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "selection_cap_exceeded"),
            WorkbenchError::SchemaViolation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "schema_violation"),
            WorkbenchError::Blinded(_) => (StatusCode::FORBIDDEN, "blinded"),
            WorkbenchError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
            WorkbenchError::InsufficientData(_) => (StatusCode::UNPROCESSABLE_ENTITY, "insufficient_data"),
            WorkbenchError::Storage(_) | WorkbenchError::Eval(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(serde_json::json!({ "error": kind, "message": self.to_string() }))).into_response()
    }
}

type App = State<Arc<Workbench>>;
type ApiResult<T> = Result<Json<T>, WorkbenchError>;

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ")
}

fn auth(wb: &Workbench, id: &str, headers: &HeaderMap) -> Result<(), WorkbenchError> {
    wb.authorize(id, bearer(headers))
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    participant_id: String,
}

#[derive(Debug, Deserialize)]
struct OpenScreening {
    review_id: String,
    participant_id: String,
}

#[derive(Debug, Deserialize)]
struct OpenExtraction {
    citation_id: String,
    task: ExtractionTask,
    participant_id: String,
}

#[derive(Debug, Deserialize)]
struct CorrectDecisions {
    #[serde(flatten)]
    decisions: SubmitDecisions,
    reason: String,
}

#[derive(Debug, Deserialize)]
struct CorrectExtraction {
    record: ExtractionRecord,
    reason: String,
}

async fn create_project(State(wb): App, Json(config): Json<ProjectConfig>) -> Result<(StatusCode, Json<ProjectSummary>), WorkbenchError> {
    wb.create_project(config).map(|s| (StatusCode::CREATED, Json(s)))
}

async fn get_project(State(wb): App, Path(id): Path<String>, h: HeaderMap) -> ApiResult<ProjectSummary> {
    auth(&wb, &id, &h)?;
    wb.project_summary(&id).map(Json)
}

async fn get_queue(State(wb): App, Path(id): Path<String>, Query(q): Query<QueueParams>, h: HeaderMap) -> ApiResult<Queue> {
    auth(&wb, &id, &h)?;
    wb.queue(&id, &q.participant_id).map(Json)
}

async fn open_screening(
    State(wb): App,
    Path(id): Path<String>,
    h: HeaderMap,
    Json(body): Json<OpenScreening>,
) -> Result<(StatusCode, Json<ScreeningView>), WorkbenchError> {
    auth(&wb, &id, &h)?;
    wb.open_screening_session(&id, &body.review_id, &body.participant_id).map(|v| (StatusCode::CREATED, Json(v)))
}

async fn open_extraction(
    State(wb): App,
    Path(id): Path<String>,
    h: HeaderMap,
    Json(body): Json<OpenExtraction>,
) -> Result<(StatusCode, Json<ExtractionView>), WorkbenchError> {
    auth(&wb, &id, &h)?;
    wb.open_extraction_session(&id, &body.citation_id, body.task, &body.participant_id).map(|v| (StatusCode::CREATED, Json(v)))
}

async fn get_screening(State(wb): App, Path(id): Path<String>, h: HeaderMap) -> ApiResult<ScreeningView> {
    auth(&wb, &id, &h)?;
    wb.screening_view(&id).map(Json)
}

async fn submit_decisions(State(wb): App, Path(id): Path<String>, h: HeaderMap, Json(body): Json<SubmitDecisions>) -> ApiResult<SessionMetrics> {
    auth(&wb, &id, &h)?;
    wb.submit_decisions(&id, body).map(Json)
}

async fn correct_decisions(State(wb): App, Path(id): Path<String>, h: HeaderMap, Json(body): Json<CorrectDecisions>) -> ApiResult<SessionMetrics> {
    auth(&wb, &id, &h)?;
    wb.correct_decisions(&id, body.decisions, &body.reason).map(Json)
}

async fn get_ai_sheet(State(wb): App, Path(id): Path<String>, h: HeaderMap) -> ApiResult<AiSheet> {
    auth(&wb, &id, &h)?;
    wb.ai_sheet(&id).map(Json)
}

async fn get_extraction(State(wb): App, Path(id): Path<String>, h: HeaderMap) -> ApiResult<ExtractionView> {
    auth(&wb, &id, &h)?;
    wb.extraction_view(&id).map(Json)
}

async fn submit_extraction(State(wb): App, Path(id): Path<String>, h: HeaderMap, Json(body): Json<SubmitExtraction>) -> ApiResult<ExtractionAck> {
    auth(&wb, &id, &h)?;
    wb.submit_extraction(&id, body).map(Json)
}

async fn correct_extraction(
    State(wb): App,
    Path(id): Path<String>,
    h: HeaderMap,
    Json(body): Json<CorrectExtraction>,
) -> Result<StatusCode, WorkbenchError> {
    auth(&wb, &id, &h)?;
    wb.correct_extraction(&id, body.record, &body.reason).map(|_| StatusCode::NO_CONTENT)
}

async fn get_report(State(wb): App, Path(id): Path<String>, h: HeaderMap) -> ApiResult<ArmComparison> {
    auth(&wb, &id, &h)?;
    wb.report(&id).await.map(Json)
}

async fn get_report_csv(State(wb): App, Path(id): Path<String>, h: HeaderMap) -> Result<Response, WorkbenchError> {
    auth(&wb, &id, &h)?;
    let report = wb.report(&id).await?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], report.to_csv()).into_response())
}

pub fn router(workbench: Arc<Workbench>) -> Router {
    Router::new()
        .route("/projects", post(create_project))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/queue", get(get_queue))
        .route("/projects/{id}/sessions/screening", post(open_screening))
        .route("/projects/{id}/sessions/extraction", post(open_extraction))
        .route("/projects/{id}/report", get(get_report))
        .route("/projects/{id}/report.csv", get(get_report_csv))
        .route("/sessions/screening/{id}", get(get_screening))
        .route("/sessions/screening/{id}/decisions", post(submit_decisions))
        .route("/sessions/screening/{id}/corrections", post(correct_decisions))
        .route("/sessions/screening/{id}/ai-sheet", get(get_ai_sheet))
        .route("/sessions/extraction/{id}", get(get_extraction))
        .route("/sessions/extraction/{id}/submit", post(submit_extraction))
        .route("/sessions/extraction/{id}/corrections", post(correct_extraction))
        .with_state(workbench)
}

/// Serves the API until the listener fails.
pub async fn serve(workbench: Arc<Workbench>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(workbench)).await
}
