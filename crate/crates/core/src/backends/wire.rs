//! Wire shapes of the backend HTTP protocol.
//!
//! JSON bodies use the field names of the domain types. Binary payloads
//! travel as CLIPRAW multipart parts: a single frame is sent as a one-frame clip.
//!
//! | endpoint                 | request parts / body                     | response            |
//! |--------------------------|------------------------------------------|---------------------|
//! | `GET /v1/capabilities`   |                                          | [`Capabilities`]    |
//! | `POST /v1/generate`      | `request` [`GenerateParams`], `observation` | CLIPRAW bytes    |
//! | `POST /v1/score`         | `request` [`ScoreRequest`], `video_0..n` | [`ScoreResponse`]   |
//! | `POST /v1/draft`         | `request` [`DraftRequest`], `clip`       | [`DraftReply`]      |
//! | `POST /v1/expand`        | `request` [`ExpandRequest`], `observation` | [`ExpandReply`]   |
//! | `POST /v1/embed`         | `request` [`EmbedParams`], `clip`        | [`EmbedResponse`]   |
//! | `POST /v1/train`         | JSON [`TrainJobSpec`]                    | [`DispatchResponse`] |
//! | `GET /v1/train/{job_id}` |                                          | [`TrainStatus`]     |
//!
//! Errors are any non-2xx status with an [`ErrorBody`].
//!
//! [`Capabilities`]: super::Capabilities
//! [`ScoreRequest`]: super::ScoreRequest
//! [`DraftRequest`]: super::DraftRequest
//! [`DraftReply`]: super::DraftReply
//! [`ExpandRequest`]: super::ExpandRequest
//! [`ExpandReply`]: super::ExpandReply
//! [`TrainJobSpec`]: super::TrainJobSpec
//! [`TrainStatus`]: super::TrainStatus

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendResult, EmbedLevel, GenerateRequest, RubricScores};
use crate::clipraw;
use crate::domain::{Fps, FrameTensor, VideoClip};

pub const CLIPRAW_MIME: &str = "application/x-clipraw";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub prompt: String,
    pub seed: u64,
    pub num_frames: u32,
    pub height: u32,
    pub width: u32,
    #[serde(default)]
    pub model_id: Option<String>,
}

impl GenerateParams {
    pub fn of(request: &GenerateRequest) -> Self {
        Self {
            prompt: request.prompt.clone(),
            seed: request.seed,
            num_frames: request.num_frames,
            height: request.height,
            width: request.width,
            model_id: request.model_id.clone(),
        }
    }

    pub fn into_request(self, observation: FrameTensor) -> GenerateRequest {
        GenerateRequest {
            observation,
            prompt: self.prompt,
            seed: self.seed,
            num_frames: self.num_frames,
            height: self.height,
            width: self.width,
            model_id: self.model_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<RubricScores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedParams {
    pub level: EmbedLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchResponse {
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub fn frame_bytes(frame: &FrameTensor) -> Vec<u8> {
    let clip = VideoClip::new(vec![frame.clone()], Fps::default()).expect("one frame");
    clip_bytes(&clip)
}

pub fn clip_bytes(clip: &VideoClip) -> Vec<u8> {
    clipraw::encode(clip).expect("valid clip encodes")
}

pub fn parse_clip(bytes: &[u8]) -> BackendResult<VideoClip> {
    clipraw::decode(bytes).map_err(|e| BackendError::Malformed(format!("clip payload: {e}")))
}

pub fn parse_frame(bytes: &[u8]) -> BackendResult<FrameTensor> {
    let clip = parse_clip(bytes)?;
    if clip.len() != 1 {
        return Err(BackendError::Malformed(format!("expected one frame, got {}", clip.len())));
    }
    Ok(clip.into_frames().remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::*;
    use serde::de::DeserializeOwned;
    use std::fmt::Debug;

    fn round_trip<T: Serialize + DeserializeOwned + PartialEq + Debug>(v: &T) {
        let json = serde_json::to_string(v).unwrap();
        assert_eq!(&serde_json::from_str::<T>(&json).unwrap(), v, "{json}");
    }

    #[test]
    fn protocol_messages_round_trip() {
        round_trip(&GenerateParams {
            prompt: "The drone moves forward.".into(),
            seed: u64::MAX,
            num_frames: 49,
            height: 480,
            width: 720,
            model_id: Some("m".into()),
        });
        round_trip(&Capabilities {
            role: Role::Embedder,
            max_shape: Some([49, 480, 720]),
            embed_dim: Some(16),
            video_frames: Some(16),
            deterministic: true,
            model_id: "e".into(),
        });
        round_trip(&ScoreRequest {
            basic_intention: "x".into(),
            rubric_id: "r".into(),
            prompt: "p".into(),
            peer_group_id: Some("g".into()),
        });
        round_trip(&ScoreResponse {
            scores: vec![RubricScores {
                intention_alignment: 1,
                spatial_consistency: 2,
                temporal_continuity: 3,
                projective_geometry: 4,
                rationale_text: "ok".into(),
            }],
        });
        round_trip(&DraftRequest {
            step: CotStep::Merge,
            template_id: "t".into(),
            prompt: "p".into(),
            action: Some("a".into()),
            stop_condition: None,
        });
        round_trip(&ExpandReply {
            basic: BasicIntention {
                subject: "The drone".into(),
                intention: "rotates left".into(),
            },
            extensions: vec![ExtendedIntention {
                subject: "The drone".into(),
                intention: "rotates left".into(),
                intention_description: "d".into(),
                potential_outcomes: "o".into(),
            }],
            model_id: "c".into(),
        });
        round_trip(&TrainJobSpec {
            manifest_ref: 3,
            base_model_id: "b".into(),
            hyperparams: Hyperparams::default(),
            job_id: None,
        });
        round_trip(&TrainStatus::Failed { reason: "r".into() });
        round_trip(&TrainStatus::Queued);
        round_trip(&EmbedResponse {
            vectors: vec![vec![0.5, -1.25]],
        });
        round_trip(&EmbedParams { level: EmbedLevel::Video });
    }

    #[test]
    fn frames_travel_as_one_frame_clips() {
        let f = FrameTensor::from_fn(3, 5, |x, y| [x as u8, y as u8, 9]).unwrap();
        assert_eq!(parse_frame(&frame_bytes(&f)).unwrap(), f);
        let two = VideoClip::new(vec![f.clone(), f], Fps::default()).unwrap();
        assert!(parse_frame(&clip_bytes(&two)).is_err());
    }

    #[test]
    fn nan_cannot_pass_as_a_number() {
        assert!(serde_json::from_str::<EmbedResponse>(r#"{"vectors":[[null]]}"#).is_err());
    }
}
