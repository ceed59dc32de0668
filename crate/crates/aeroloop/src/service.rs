//! HTTP service for the review queue, IAR sessions, pipeline status and clip
//! previews.
//!
//! The review and IAR logs are re-read on every request, so the service stays
//! consistent with pipeline runs appending to the same dataset. Mutations are
//! serialised by one process-wide lock.

use std::sync::{Arc, Mutex};

use aeroloop_core::annotate::{self, QueueStats, ReviewError, ReviewQueue, ReviewTask, Verdict};
use aeroloop_core::metrics::iar::{assign_raters, default_rater_ids, IarError, IarItem, IarStore};
use aeroloop_core::metrics::{compute_iar, IarSession};
use aeroloop_core::store::Dataset;
use aeroloop_core::ClipId;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{info, warn};

use crate::config::PipelineConfig;
use crate::pipeline::{stage_status, StageEvent};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::UnknownTask(_) => StatusCode::NOT_FOUND,
            ReviewError::AlreadyResolved(_) | ReviewError::ClaimedByOther { .. } => StatusCode::CONFLICT,
            ReviewError::InvalidEdit => StatusCode::UNPROCESSABLE_ENTITY,
            ReviewError::NotAnnotated(_) | ReviewError::Log(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<IarError> for ApiError {
    fn from(e: IarError) -> Self {
        let status = match &e {
            IarError::UnknownSession(_) | IarError::UnknownItem { .. } => StatusCode::NOT_FOUND,
            IarError::AlreadyJudged(_) | IarError::SessionExists(_) => StatusCode::CONFLICT,
            IarError::WrongRater { .. } => StatusCode::FORBIDDEN,
            IarError::NoRaters | IarError::Empty => StatusCode::UNPROCESSABLE_ENTITY,
            IarError::Unjudged(_) | IarError::Log(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    pub config: PipelineConfig,
    pub dataset: Dataset,
    lock: Mutex<()>,
}

impl AppState {
    pub fn new(config: PipelineConfig) -> std::io::Result<Self> {
        Ok(Self {
            dataset: config.dataset()?,
            config,
            lock: Mutex::new(()),
        })
    }

    fn queue(&self) -> ApiResult<ReviewQueue> {
        Ok(ReviewQueue::open_with_lease(
            &self.dataset.review_log_path(),
            chrono::Duration::minutes(self.config.annotate.lease_minutes),
        )?)
    }

    fn iar(&self) -> ApiResult<IarStore> {
        Ok(IarStore::open(&self.dataset.iar_log_path())?)
    }
}

/// Runs `f` on the blocking pool while holding the state lock.
async fn exclusive<T: Send + 'static>(
    state: &Arc<AppState>,
    f: impl FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let _guard = state.lock.lock().unwrap_or_else(|p| p.into_inner());
        f(&state)
    })
    .await
    .map_err(ApiError::internal)?
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/review/next", get(review_next))
        .route("/review/stats", get(review_stats))
        .route("/review/{task_id}", get(review_get).post(review_resolve))
        .route("/iar/sessions", post(iar_create))
        .route("/iar/sessions/{id}", get(iar_get))
        .route("/iar/sessions/{id}/next", get(iar_next))
        .route("/iar/{session}/{item}", post(iar_judge))
        .route("/pipeline/status", get(pipeline_status))
        .route("/clips/{clip_id}/preview", get(clip_preview))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new().route("/health", get(health)).merge(api).with_state(state)
}

async fn require_token(State(state): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    let Some(expected) = state.config.service.auth_token.as_deref() else {
        return next.run(request).await;
    };
    let presented = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(expected) {
        next.run(request).await
    } else {
        let mut r = ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        r.headers_mut().insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
        r
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": VERSION }))
}

fn preview_url(clip: &ClipId) -> String {
    format!("/clips/{clip}/preview")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TaskView {
    #[serde(flatten)]
    pub task: ReviewTask,
    pub preview_url: String,
}

impl From<ReviewTask> for TaskView {
    fn from(task: ReviewTask) -> Self {
        Self {
            preview_url: preview_url(&task.clip_id),
            task,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ReviewerQuery {
    reviewer: Option<String>,
}

const ANONYMOUS: &str = "anonymous";

async fn review_next(State(state): State<Arc<AppState>>, Query(q): Query<ReviewerQuery>) -> ApiResult<Response> {
    let reviewer = q.reviewer.unwrap_or_else(|| ANONYMOUS.into());
    let task = exclusive(&state, move |s| Ok(s.queue()?.claim(&reviewer)?)).await?;
    Ok(match task {
        Some(t) => Json(TaskView::from(t)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn review_get(State(state): State<Arc<AppState>>, Path(task_id): Path<String>) -> ApiResult<Json<TaskView>> {
    exclusive(&state, move |s| {
        s.queue()?
            .get(&task_id)
            .cloned()
            .map(|t| Json(t.into()))
            .ok_or_else(|| ReviewError::UnknownTask(task_id).into())
    })
    .await
}

async fn review_stats(State(state): State<Arc<AppState>>) -> ApiResult<Json<QueueStats>> {
    exclusive(&state, |s| Ok(Json(s.queue()?.stats()))).await
}

#[derive(Debug, Deserialize)]
pub struct ResolveBody {
    pub verdict: Verdict,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub reviewer: Option<String>,
}

async fn review_resolve(
    State(state): State<Arc<AppState>>,
    Path(task_id): Path<String>,
    Json(body): Json<ResolveBody>,
) -> ApiResult<Json<TaskView>> {
    exclusive(&state, move |s| {
        let mut queue = s.queue()?;
        let reviewer = body.reviewer.as_deref().unwrap_or(ANONYMOUS);
        let task = queue.apply_review(&task_id, body.verdict, body.text.as_deref(), reviewer)?;
        // The log entry above is the commit point; the registry and manifest
        // are derived and can be rebuilt if this process dies here.
        let mut registry = s.dataset.registry().map_err(ApiError::internal)?;
        if annotate::sync_registry(&queue, &mut registry) > 0 {
            s.dataset.save_registry(&registry).map_err(ApiError::internal)?;
        }
        let stats = queue.stats();
        if stats.pending + stats.claimed == 0 {
            let a = &s.config.annotate;
            match annotate::publish_manifest(&queue, &registry, &s.dataset.manifests(), a.split_ratio, a.split_seed) {
                Ok(Some(m)) => info!(version = m.version, "reviewed manifest published"),
                Ok(None) => {}
                Err(e) => warn!(error = %e, "manifest publish failed; the annotate stage will retry"),
            }
        }
        Ok(Json(task.into()))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct CreateSessionBody {
    pub session_id: String,
    pub items: Vec<IarItem>,
    /// Explicit rater ids; otherwise `raters` generated ids.
    #[serde(default)]
    pub rater_ids: Option<Vec<String>>,
    #[serde(default)]
    pub raters: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub total: usize,
    pub judged: usize,
    pub per_rater: Vec<(String, usize)>,
    pub iar_percent: Option<f64>,
}

fn session_view(s: &IarSession) -> SessionView {
    SessionView {
        session_id: s.session_id.clone(),
        total: s.items.len(),
        judged: s.judged(),
        per_rater: s.raters.iter().cloned().zip(s.per_rater_counts()).collect(),
        iar_percent: compute_iar(s).ok(),
    }
}

async fn iar_create(State(state): State<Arc<AppState>>, Json(body): Json<CreateSessionBody>) -> ApiResult<(StatusCode, Json<SessionView>)> {
    exclusive(&state, move |s| {
        let raters = body
            .rater_ids
            .unwrap_or_else(|| default_rater_ids(body.raters.unwrap_or(s.config.eval.raters)));
        let session = assign_raters(&body.session_id, body.items, raters, body.seed)?;
        let mut store = s.iar()?;
        let created = store.create(session)?;
        Ok((StatusCode::CREATED, Json(session_view(created))))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct RaterQuery {
    rater: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ItemView {
    pub session_id: String,
    pub item: usize,
    pub rater: String,
    pub intention: String,
    pub preview_url: String,
    pub judgment: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RaterView {
    #[serde(flatten)]
    pub session: SessionView,
    /// The rater's items in presentation order, present when `rater` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<ItemView>>,
}

fn item_view(s: &IarSession, item: usize) -> ItemView {
    ItemView {
        session_id: s.session_id.clone(),
        item,
        rater: s.raters[s.assignment[item]].clone(),
        intention: s.items[item].intention.clone(),
        preview_url: preview_url(&s.items[item].video_ref),
        judgment: s.judgments[item],
    }
}

fn session_and_rater(store: &IarStore, id: &str, rater: Option<&str>) -> ApiResult<(IarSession, Option<usize>)> {
    let session = store.get(id).cloned().ok_or_else(|| IarError::UnknownSession(id.to_owned()))?;
    let idx = match rater {
        Some(r) => Some(
            session
                .rater_index(r)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("rater {r} is not in session {id}")))?,
        ),
        None => None,
    };
    Ok((session, idx))
}

async fn iar_get(State(state): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<RaterQuery>) -> ApiResult<Json<RaterView>> {
    exclusive(&state, move |s| {
        let (session, rater) = session_and_rater(&s.iar()?, &id, q.rater.as_deref())?;
        Ok(Json(RaterView {
            session: session_view(&session),
            items: rater.map(|r| session.items_for(r).into_iter().map(|i| item_view(&session, i)).collect()),
        }))
    })
    .await
}

async fn iar_next(State(state): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<RaterQuery>) -> ApiResult<Response> {
    exclusive(&state, move |s| {
        let rater = q
            .rater
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "query parameter `rater` is required"))?;
        let (session, idx) = session_and_rater(&s.iar()?, &id, Some(&rater))?;
        let idx = idx.expect("rater given");
        let done = session.items_for(idx).iter().filter(|&&i| session.judgments[i].is_some()).count();
        let total = session.items_for(idx).len();
        Ok(match session.next_for(idx) {
            Some(item) => Json(json!({
                "item": item_view(&session, item),
                "progress": { "judged": done, "total": total },
            }))
            .into_response(),
            None => StatusCode::NO_CONTENT.into_response(),
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct JudgeBody {
    pub aligned: bool,
    #[serde(default)]
    pub rater: Option<String>,
}

async fn iar_judge(
    State(state): State<Arc<AppState>>,
    Path((session, item)): Path<(String, usize)>,
    Json(body): Json<JudgeBody>,
) -> ApiResult<Json<ItemView>> {
    exclusive(&state, move |s| {
        let mut store = s.iar()?;
        let updated = store.judge(&session, item, body.rater.as_deref(), body.aligned)?;
        Ok(Json(item_view(updated, item)))
    })
    .await
}

async fn pipeline_status(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<StageEvent>>> {
    exclusive(&state, |s| stage_status(&s.dataset).map(Json).map_err(ApiError::internal)).await
}

async fn clip_preview(State(state): State<Arc<AppState>>, Path(clip_id): Path<String>) -> ApiResult<Response> {
    let id = ClipId::parse(&clip_id).ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "clip id must be 64 lowercase hex characters"))?;
    let path = state.dataset.clips().path_for(&id);
    if !path.is_file() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no clip {id}")));
    }
    let svc = &state.config.service;
    let Some(cmd) = svc.preview_encoder.as_deref() else {
        return Err(ApiError::new(StatusCode::NOT_IMPLEMENTED, "no preview encoder configured"));
    };
    let mut words = cmd.split_whitespace();
    let program = words.next().ok_or_else(|| ApiError::internal("empty preview encoder command"))?;
    let output = tokio::process::Command::new(program)
        .args(words)
        .arg(&path)
        .kill_on_drop(true)
        .output()
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, format!("preview encoder: {e}")))?;
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        return Err(ApiError::new(StatusCode::BAD_GATEWAY, format!("preview encoder exited with {}: {}", output.status, stderr.trim())));
    }
    let content_type = HeaderValue::from_str(&svc.preview_content_type).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, content_type)], output.stdout).into_response())
}

/// Binds and serves until ctrl-c; requests already running finish first.
pub async fn serve(config: PipelineConfig) -> anyhow::Result<()> {
    let bind = config.service.bind.clone();
    let state = Arc::new(AppState::new(config)?);
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            info!("shutting down");
        })
        .await?;
    Ok(())
}
