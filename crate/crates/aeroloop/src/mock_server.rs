//! Serves one mock backend role over the `/v1` wire protocol, so the HTTP
//! client path can be exercised without model servers.

use std::collections::HashMap;
use std::sync::Arc;

use aeroloop_core::backends::mock::{MockCritic, MockEmbedder, MockGenerator, MockTrainer};
use aeroloop_core::backends::wire::{self, DispatchResponse, EmbedParams, EmbedResponse, GenerateParams, ScoreResponse};
use aeroloop_core::backends::{
    BackendError, Critic, DraftRequest, EmbedLevel, Embedder, ExpandRequest, Generator, Role, ScoreRequest, TrainJobSpec,
    Trainer,
};
use aeroloop_core::store::Dataset;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::json;

pub struct MockRole {
    pub role: Role,
    generator: Option<MockGenerator>,
    critic: Option<MockCritic>,
    trainer: Option<MockTrainer>,
    embedder: Option<MockEmbedder>,
}

impl MockRole {
    pub fn generator() -> Self {
        Self::empty(Role::Generator).with(|m| m.generator = Some(MockGenerator::default()))
    }

    pub fn critic(seed: u64) -> Self {
        Self::empty(Role::Critic).with(|m| m.critic = Some(MockCritic::new(seed)))
    }

    /// The trainer reads manifests and clips from `dataset`, like a real
    /// trainer sharing the dataset volume.
    pub fn trainer(dataset: &Dataset) -> Self {
        let t = MockTrainer::new(dataset.manifests(), Arc::new(dataset.clips()));
        Self::empty(Role::Trainer).with(|m| m.trainer = Some(t))
    }

    pub fn embedder(video_frames: usize) -> Self {
        Self::empty(Role::Embedder).with(|m| m.embedder = Some(MockEmbedder::new(video_frames)))
    }

    fn empty(role: Role) -> Self {
        Self {
            role,
            generator: None,
            critic: None,
            trainer: None,
            embedder: None,
        }
    }

    fn with(mut self, f: impl FnOnce(&mut Self)) -> Self {
        f(&mut self);
        self
    }
}

struct WireError(BackendError);

impl From<BackendError> for WireError {
    fn from(e: BackendError) -> Self {
        Self(e)
    }
}

impl IntoResponse for WireError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            BackendError::UnknownJob(_) | BackendError::UnknownManifest(_) => StatusCode::NOT_FOUND,
            BackendError::InvalidRequest(_) | BackendError::Malformed(_) | BackendError::Clip(_) => StatusCode::BAD_REQUEST,
            BackendError::RoleMismatch { .. } => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type WireResult<T> = Result<T, WireError>;

fn bad(msg: impl Into<String>) -> WireError {
    WireError(BackendError::InvalidRequest(msg.into()))
}

fn not_served(role: Role) -> WireError {
    WireError(BackendError::InvalidRequest(format!("this server is a {role:?} backend")))
}

async fn parts(mut mp: Multipart) -> WireResult<HashMap<String, Bytes>> {
    let mut out = HashMap::new();
    while let Some(field) = mp.next_field().await.map_err(|e| bad(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_owned();
        let bytes = field.bytes().await.map_err(|e| bad(e.to_string()))?;
        out.insert(name, bytes);
    }
    Ok(out)
}

fn json_part<T: DeserializeOwned>(parts: &HashMap<String, Bytes>) -> WireResult<T> {
    let raw = parts.get("request").ok_or_else(|| bad("missing `request` part"))?;
    serde_json::from_slice(raw).map_err(|e| bad(format!("request: {e}")))
}

fn part<'a>(parts: &'a HashMap<String, Bytes>, name: &str) -> WireResult<&'a Bytes> {
    parts.get(name).ok_or_else(|| bad(format!("missing `{name}` part")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> WireResult<T> + Send + 'static) -> WireResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| WireError(BackendError::Connection(e.to_string())))?
}

type S = State<Arc<MockRole>>;

async fn capabilities(State(m): S) -> WireResult<Response> {
    let caps = match m.role {
        Role::Generator => m.generator.as_ref().map(|g| g.capabilities()),
        Role::Critic => m.critic.as_ref().map(|c| c.capabilities()),
        Role::Trainer => m.trainer.as_ref().map(|t| t.capabilities()),
        Role::Embedder => m.embedder.as_ref().map(|e| e.capabilities()),
    }
    .ok_or_else(|| not_served(m.role))??;
    Ok(Json(caps).into_response())
}

async fn generate(State(m): S, mp: Multipart) -> WireResult<Response> {
    let parts = parts(mp).await?;
    blocking(move || {
        let g = m.generator.as_ref().ok_or_else(|| not_served(m.role))?;
        let params: GenerateParams = json_part(&parts)?;
        let observation = wire::parse_frame(part(&parts, "observation")?)?;
        let clip = g.generate(&params.into_request(observation))?;
        Ok(([(header::CONTENT_TYPE, wire::CLIPRAW_MIME)], wire::clip_bytes(&clip)).into_response())
    })
    .await
}

async fn score(State(m): S, mp: Multipart) -> WireResult<Json<ScoreResponse>> {
    let parts = parts(mp).await?;
    blocking(move || {
        let c = m.critic.as_ref().ok_or_else(|| not_served(m.role))?;
        let request: ScoreRequest = json_part(&parts)?;
        let mut videos = Vec::new();
        while let Some(b) = parts.get(&format!("video_{}", videos.len())) {
            videos.push(wire::parse_clip(b)?);
        }
        let refs: Vec<_> = videos.iter().collect();
        Ok(Json(ScoreResponse {
            scores: c.score(&refs, &request)?,
        }))
    })
    .await
}

async fn draft(State(m): S, mp: Multipart) -> WireResult<Response> {
    let parts = parts(mp).await?;
    blocking(move || {
        let c = m.critic.as_ref().ok_or_else(|| not_served(m.role))?;
        let request: DraftRequest = json_part(&parts)?;
        let clip = wire::parse_clip(part(&parts, "clip")?)?;
        Ok(Json(c.draft(&clip, &request)?).into_response())
    })
    .await
}

async fn expand(State(m): S, mp: Multipart) -> WireResult<Response> {
    let parts = parts(mp).await?;
    blocking(move || {
        let c = m.critic.as_ref().ok_or_else(|| not_served(m.role))?;
        let request: ExpandRequest = json_part(&parts)?;
        let observation = wire::parse_frame(part(&parts, "observation")?)?;
        Ok(Json(c.expand(&observation, &request)?).into_response())
    })
    .await
}

async fn embed(State(m): S, mp: Multipart) -> WireResult<Json<EmbedResponse>> {
    let parts = parts(mp).await?;
    blocking(move || {
        let e = m.embedder.as_ref().ok_or_else(|| not_served(m.role))?;
        let params: EmbedParams = json_part(&parts)?;
        let clip = wire::parse_clip(part(&parts, "clip")?)?;
        let vectors = match params.level {
            EmbedLevel::Frame => e.embed_frames(clip.frames())?,
            EmbedLevel::Video => vec![e.embed_video(&clip)?],
        };
        Ok(Json(EmbedResponse { vectors }))
    })
    .await
}

async fn train(State(m): S, Json(spec): Json<TrainJobSpec>) -> WireResult<Json<DispatchResponse>> {
    blocking(move || {
        let t = m.trainer.as_ref().ok_or_else(|| not_served(m.role))?;
        Ok(Json(DispatchResponse {
            job_id: t.dispatch(&spec)?,
        }))
    })
    .await
}

async fn train_status(State(m): S, Path(job_id): Path<String>) -> WireResult<Response> {
    let t = m.trainer.as_ref().ok_or_else(|| not_served(m.role))?;
    Ok(Json(t.poll(&job_id)?).into_response())
}

pub fn router(mock: MockRole) -> Router {
    Router::new()
        .route("/v1/capabilities", get(capabilities))
        .route("/v1/generate", post(generate))
        .route("/v1/score", post(score))
        .route("/v1/draft", post(draft))
        .route("/v1/expand", post(expand))
        .route("/v1/embed", post(embed))
        .route("/v1/train", post(train))
        .route("/v1/train/{job_id}", get(train_status))
        .layer(DefaultBodyLimit::disable())
        .with_state(Arc::new(mock))
}

pub async fn serve(mock: MockRole, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(role = ?mock.role, addr = %listener.local_addr()?, "mock backend serving");
    axum::serve(listener, router(mock))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
