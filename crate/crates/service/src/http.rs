//! JSON-over-HTTP API. Handlers hand the blocking service calls to tokio's
//! blocking pool.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use facade_core::guidance::{validate_plan, ValidationReport};
use facade_core::SketchMeta;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::run::{PipelineRun, PlanEdit};
use crate::service::{PipelineService, ServiceError};

pub const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::InvalidState { .. } => (StatusCode::CONFLICT, "invalid_state"),
            ServiceError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ServiceError::ValidationRejected(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "validation_rejected")
            }
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::Store(_) | ServiceError::Replay(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        let mut body = json!({"error": kind, "message": self.0.to_string()});
        if let ServiceError::ValidationRejected(report) = &self.0 {
            body["report"] = serde_json::to_value(report).expect("report serializes");
        }
        (status, Json(body)).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(ServiceError::BadRequest(msg.into()))
}

/// `GET /api/runs/{id}` body: the run plus links and the current plan's report.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunView {
    #[serde(flatten)]
    pub run: PipelineRun,
    pub artifact_urls: BTreeMap<String, String>,
    pub plan_report: Option<ValidationReport>,
}

impl RunView {
    fn of(run: PipelineRun) -> Self {
        let artifact_urls = run
            .artifacts
            .keys()
            .map(|k| (k.clone(), format!("/api/runs/{}/artifacts/{k}", run.run_id)))
            .collect();
        let plan_report = run
            .plan
            .as_ref()
            .map(|p| validate_plan(p, run.config.tolerance));
        Self {
            run,
            artifact_urls,
            plan_report,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditRequest {
    pub edit: PlanEdit,
}

type AppState = Arc<PipelineService>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| {
            ApiError(ServiceError::BadRequest(format!(
                "request worker failed: {e}"
            )))
        })?
        .map_err(ApiError)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"ok": true}))
}

/// Multipart fields: `sketch` (PNG file, required), `brief` (text),
/// `config` (JSON [`PipelineConfig`]) and `meta` (JSON sketch metadata).
async fn create_run(
    State(svc): State<AppState>,
    mut form: Multipart,
) -> Result<Response, ApiError> {
    let (mut png, mut brief, mut config, mut meta, mut filename) =
        (None, String::new(), None, None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| bad_request(e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "sketch" => {
                filename = field.file_name().map(str::to_string);
                png = Some(
                    field
                        .bytes()
                        .await
                        .map_err(|e| bad_request(e.to_string()))?,
                );
            }
            "brief" => brief = field.text().await.map_err(|e| bad_request(e.to_string()))?,
            "config" => {
                let text = field.text().await.map_err(|e| bad_request(e.to_string()))?;
                config = Some(
                    serde_json::from_str::<PipelineConfig>(&text)
                        .map_err(|e| bad_request(format!("config: {e}")))?,
                );
            }
            "meta" => {
                let text = field.text().await.map_err(|e| bad_request(e.to_string()))?;
                meta = Some(
                    serde_json::from_str::<SketchMeta>(&text)
                        .map_err(|e| bad_request(format!("meta: {e}")))?,
                );
            }
            other => return Err(bad_request(format!("unexpected form field `{other}`"))),
        }
    }
    let png = png.ok_or_else(|| bad_request("missing `sketch` file field"))?;
    let meta = meta.unwrap_or_else(|| {
        let stem = filename
            .as_deref()
            .and_then(|f| std::path::Path::new(f).file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sketch".into());
        SketchMeta::new(stem)
    });
    let run = blocking(move || svc.create_run(&png, meta, &brief, config)).await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({"run_id": run.run_id, "state": run.state})),
    )
        .into_response())
}

async fn get_run(
    State(svc): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<RunView>, ApiError> {
    Ok(Json(RunView::of(svc.get(&id)?)))
}

async fn advance(
    State(svc): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<RunView>, ApiError> {
    Ok(Json(RunView::of(blocking(move || svc.advance(&id)).await?)))
}

async fn approve(
    State(svc): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<RunView>, ApiError> {
    Ok(Json(RunView::of(blocking(move || svc.approve(&id)).await?)))
}

async fn reset(
    State(svc): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<RunView>, ApiError> {
    Ok(Json(RunView::of(blocking(move || svc.reset(&id)).await?)))
}

async fn edit_plan(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<EditRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| bad_request(e.body_text()))?;
    let plan = blocking(move || svc.edit_plan(&id, req.edit)).await?;
    Ok(Json(plan).into_response())
}

async fn get_artifact(
    State(svc): State<AppState>,
    Path((id, name)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let (r, bytes) = blocking(move || svc.artifact(&id, &name)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, r.media_type),
            (header::ETAG, format!("\"{}\"", r.hash)),
            (
                header::CACHE_CONTROL,
                "public, max-age=31536000, immutable".to_string(),
            ),
        ],
        bytes,
    )
        .into_response())
}

pub fn router(svc: Arc<PipelineService>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/runs", post(create_run))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/advance", post(advance))
        .route("/api/runs/{id}/approve", post(approve))
        .route("/api/runs/{id}/reset", post(reset))
        .route("/api/runs/{id}/plan", patch(edit_plan))
        .route("/api/runs/{id}/artifacts/{name}", get(get_artifact))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(svc)
}

pub async fn serve(addr: SocketAddr, svc: Arc<PipelineService>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(svc)).await
}
