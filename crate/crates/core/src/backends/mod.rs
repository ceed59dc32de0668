//! Protocols for the four external model roles and their implementations.
//!
//! Each role is a blocking trait so the orchestration code can stay
//! synchronous and parallelise with threads. [`http`] speaks the JSON +
//! multipart wire protocol; [`mock`] provides deterministic stand-ins that are
//! pure functions of their inputs.

pub mod http;
pub mod mock;
pub mod retry;
pub mod wire;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::domain::{ClipError, FrameTensor, VideoClip};

pub use retry::{ConcurrencyLimit, RetryPolicy};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("backend returned {status}: {message}")]
    Remote { status: u16, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("expected {expected_frames}x{expected_height}x{expected_width}, got {frames}x{height}x{width}")]
    ShapeMismatch {
        expected_frames: u32,
        expected_height: u32,
        expected_width: u32,
        frames: u32,
        height: u32,
        width: u32,
    },
    #[error("embedding dimension changed from {expected} to {got}")]
    DimensionDrift { expected: usize, got: usize },
    #[error("non-finite value in embedding")]
    NonFinite,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown train job {0}")]
    UnknownJob(String),
    #[error("unknown manifest version {0}")]
    UnknownManifest(u64),
    #[error("backend role mismatch: expected {expected:?}, got {got:?}")]
    RoleMismatch { expected: Role, got: Role },
    #[error(transparent)]
    Clip(#[from] ClipError),
}

impl BackendError {
    /// Only failures where the request may not have reached the backend are retried.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Timeout(_) | Self::Connection(_))
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Critic,
    Trainer,
    Embedder,
}

/// Handshake reply of `GET /v1/capabilities`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub role: Role,
    /// `[frames, height, width]`.
    pub max_shape: Option<[u32; 3]>,
    pub embed_dim: Option<usize>,
    /// Frame count expected for video-level embeddings.
    #[serde(default)]
    pub video_frames: Option<usize>,
    pub deterministic: bool,
    pub model_id: String,
}

impl Capabilities {
    pub fn expect_role(&self, role: Role) -> BackendResult<()> {
        if self.role == role {
            Ok(())
        } else {
            Err(BackendError::RoleMismatch {
                expected: role,
                got: self.role,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub observation: FrameTensor,
    pub prompt: String,
    pub seed: u64,
    pub num_frames: u32,
    pub height: u32,
    pub width: u32,
    /// Weights to generate with; the backend's active model when absent.
    pub model_id: Option<String>,
}

impl GenerateRequest {
    pub fn validate(&self) -> BackendResult<()> {
        if self.num_frames < 1 || self.height < 1 || self.width < 1 {
            return Err(BackendError::InvalidRequest(format!(
                "shape {}x{}x{} has a zero dimension",
                self.num_frames, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn fits(&self, caps: &Capabilities) -> bool {
        caps.max_shape
            .is_none_or(|[f, h, w]| self.num_frames <= f && self.height <= h && self.width <= w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub intention_alignment: f64,
    pub spatial_consistency: f64,
    pub temporal_continuity: f64,
    pub projective_geometry: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            intention_alignment: 1.0,
            spatial_consistency: 1.0,
            temporal_continuity: 1.0,
            projective_geometry: 1.0,
        }
    }
}

impl ScoreWeights {
    pub fn max_total(&self) -> f64 {
        10.0 * (self.intention_alignment + self.spatial_consistency + self.temporal_continuity + self.projective_geometry)
    }
}

/// Four rubric dimensions as returned by the critic, before weighting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubricScores {
    pub intention_alignment: u8,
    pub spatial_consistency: u8,
    pub temporal_continuity: u8,
    pub projective_geometry: u8,
    #[serde(default)]
    pub rationale_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticScore {
    pub intention_alignment: u8,
    pub spatial_consistency: u8,
    pub temporal_continuity: u8,
    pub projective_geometry: u8,
    pub total: f64,
    pub rationale_text: String,
}

impl CriticScore {
    pub fn from_rubric(r: RubricScores, w: &ScoreWeights) -> BackendResult<Self> {
        let dims = [
            r.intention_alignment,
            r.spatial_consistency,
            r.temporal_continuity,
            r.projective_geometry,
        ];
        if let Some(bad) = dims.iter().find(|&&d| d > 10) {
            return Err(BackendError::Malformed(format!("score {bad} outside 0..=10")));
        }
        let total = w.intention_alignment * f64::from(r.intention_alignment)
            + w.spatial_consistency * f64::from(r.spatial_consistency)
            + w.temporal_continuity * f64::from(r.temporal_continuity)
            + w.projective_geometry * f64::from(r.projective_geometry);
        Ok(Self {
            intention_alignment: r.intention_alignment,
            spatial_consistency: r.spatial_consistency,
            temporal_continuity: r.temporal_continuity,
            projective_geometry: r.projective_geometry,
            total,
            rationale_text: r.rationale_text,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub basic_intention: String,
    pub rubric_id: String,
    pub prompt: String,
    #[serde(default)]
    pub peer_group_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotStep {
    Action,
    StopCondition,
    Merge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftRequest {
    pub step: CotStep,
    pub template_id: String,
    pub prompt: String,
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub stop_condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftReply {
    pub text: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandRequest {
    pub m: usize,
    pub template_id: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicIntention {
    pub subject: String,
    pub intention: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtendedIntention {
    pub subject: String,
    pub intention: String,
    pub intention_description: String,
    pub potential_outcomes: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandReply {
    pub basic: BasicIntention,
    pub extensions: Vec<ExtendedIntention>,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub epochs: u32,
    pub batch_size: u32,
    pub grad_accum_steps: u32,
    /// `[frames, height, width]`.
    pub resolution: [u32; 3],
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 2,
            grad_accum_steps: 8,
            resolution: [49, 480, 720],
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> BackendResult<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 || self.resolution.contains(&0) {
            return Err(BackendError::InvalidRequest(format!("hyperparameters rejected: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJobSpec {
    pub manifest_ref: u64,
    pub base_model_id: String,
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub job_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TrainStatus {
    Queued,
    Running,
    Done { model_id: String, final_loss: f64 },
    Failed { reason: String },
}

impl TrainStatus {
    pub fn is_finished(&self) -> bool {
        matches!(self, Self::Done { .. } | Self::Failed { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedLevel {
    Frame,
    Video,
}

pub trait Generator: Send + Sync {
    fn capabilities(&self) -> BackendResult<Capabilities>;
    fn generate(&self, request: &GenerateRequest) -> BackendResult<VideoClip>;
}

pub trait Critic: Send + Sync {
    fn capabilities(&self) -> BackendResult<Capabilities>;
    /// Scores every video against the same intention in one comparative context.
    fn score(&self, videos: &[&VideoClip], request: &ScoreRequest) -> BackendResult<Vec<RubricScores>>;
    fn draft(&self, clip: &VideoClip, request: &DraftRequest) -> BackendResult<DraftReply>;
    fn expand(&self, observation: &FrameTensor, request: &ExpandRequest) -> BackendResult<ExpandReply>;
}

pub trait Trainer: Send + Sync {
    fn capabilities(&self) -> BackendResult<Capabilities>;
    fn dispatch(&self, spec: &TrainJobSpec) -> BackendResult<String>;
    fn poll(&self, job_id: &str) -> BackendResult<TrainStatus>;
}

pub trait Embedder: Send + Sync {
    fn capabilities(&self) -> BackendResult<Capabilities>;
    /// One vector per frame.
    fn embed_frames(&self, frames: &[FrameTensor]) -> BackendResult<Vec<Vec<f64>>>;
    /// One vector for the whole clip, which must already have the declared frame count.
    fn embed_video(&self, clip: &VideoClip) -> BackendResult<Vec<f64>>;
}

/// Shared handles to one backend per role.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn Generator>,
    pub critic: Arc<dyn Critic>,
    pub trainer: Arc<dyn Trainer>,
    pub embedder: Arc<dyn Embedder>,
}

/// Mean absolute per-sample difference between two equally sized frames, in [0, 1].
pub fn frame_mae(a: &FrameTensor, b: &FrameTensor) -> Option<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return None;
    }
    let sum: u64 = a.data().iter().zip(b.data()).map(|(x, y)| u64::from(x.abs_diff(*y))).sum();
    Some(sum as f64 / a.data().len() as f64 / 255.0)
}

pub const FIRST_FRAME_MAE_WARN: f64 = 0.05;

/// Calls the generator and enforces the requested output shape. A first frame
/// that drifts from the observation is logged, not rejected.
pub fn checked_generate(generator: &dyn Generator, request: &GenerateRequest) -> BackendResult<VideoClip> {
    request.validate()?;
    let clip = generator.generate(request)?;
    let (frames, height, width) = (clip.len() as u32, clip.height(), clip.width());
    if (frames, height, width) != (request.num_frames, request.height, request.width) {
        return Err(BackendError::ShapeMismatch {
            expected_frames: request.num_frames,
            expected_height: request.height,
            expected_width: request.width,
            frames,
            height,
            width,
        });
    }
    if let Some(mae) = frame_mae(clip.first_frame(), &request.observation) {
        if mae > FIRST_FRAME_MAE_WARN {
            warn!(mae, seed = request.seed, "first generated frame departs from the observation");
        }
    }
    Ok(clip)
}

/// Checks that every vector is finite and `expected` long, or fixes the
/// dimension from the first vector when `expected` is unset.
pub fn validate_embeddings(vectors: &[Vec<f64>], expected: &mut Option<usize>) -> BackendResult<()> {
    for v in vectors {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(BackendError::NonFinite);
        }
        match *expected {
            None => *expected = Some(v.len()),
            Some(d) if d != v.len() => return Err(BackendError::DimensionDrift { expected: d, got: v.len() }),
            Some(_) => {}
        }
    }
    Ok(())
}
