//! Value types shared by every stage of the pipeline.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::MotionStats;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClipError {
    #[error("frame dimensions must be at least 1x1, got {height}x{width}")]
    ZeroDimension { height: u32, width: u32 },
    #[error("frame data has {actual} bytes, expected {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("clip has no frames")]
    Empty,
    #[error("frame {index} is {height}x{width}, clip is {expected_height}x{expected_width}")]
    FrameShapeMismatch {
        index: usize,
        height: u32,
        width: u32,
        expected_height: u32,
        expected_width: u32,
    },
    #[error("frame rate {numerator}/{denominator} is not positive")]
    InvalidFps { numerator: u32, denominator: u32 },
    #[error("window [{start}, {end}) is outside a clip of {len} frames")]
    WindowOutOfRange { start: usize, end: usize, len: usize },
}

/// One RGB8 frame, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct FrameTensor {
    height: u32,
    width: u32,
    data: Vec<u8>,
}

impl FrameTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: u32, width: u32, data: Vec<u8>) -> Result<Self, ClipError> {
        if height == 0 || width == 0 {
            return Err(ClipError::ZeroDimension { height, width });
        }
        let expected = height as usize * width as usize * Self::CHANNELS;
        if data.len() != expected {
            return Err(ClipError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// A frame filled with a single colour.
    pub fn filled(height: u32, width: u32, rgb: [u8; 3]) -> Result<Self, ClipError> {
        let pixels = height as usize * width as usize;
        let data = rgb.iter().copied().cycle().take(pixels * 3).collect();
        Self::new(height, width, data)
    }

    /// Builds a frame by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        height: u32,
        width: u32,
        mut f: impl FnMut(u32, u32) -> [u8; 3],
    ) -> Result<Self, ClipError> {
        let mut data = Vec::with_capacity(height as usize * width as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Per-pixel luminance, `0.299 R + 0.587 G + 0.114 B`, in the 0..=255 range.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }
}

impl fmt::Debug for FrameTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FrameTensor")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("bytes", &self.data.len())
            .finish()
    }
}

/// Frame rate as a positive rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fps {
    pub numerator: u32,
    pub denominator: u32,
}

impl Fps {
    pub fn new(numerator: u32, denominator: u32) -> Result<Self, ClipError> {
        if numerator == 0 || denominator == 0 {
            return Err(ClipError::InvalidFps {
                numerator,
                denominator,
            });
        }
        Ok(Self {
            numerator,
            denominator,
        })
    }

    pub fn integer(fps: u32) -> Self {
        Self::new(fps.max(1), 1).expect("non-zero")
    }

    pub fn as_f64(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

impl Default for Fps {
    fn default() -> Self {
        Self::integer(30)
    }
}

/// An ordered, non-empty list of same-sized frames.
#[derive(Clone, PartialEq, Eq)]
pub struct VideoClip {
    frames: Vec<FrameTensor>,
    fps: Fps,
}

impl VideoClip {
    pub fn new(frames: Vec<FrameTensor>, fps: Fps) -> Result<Self, ClipError> {
        let first = frames.first().ok_or(ClipError::Empty)?;
        let (h, w) = (first.height, first.width);
        for (index, frame) in frames.iter().enumerate() {
            if frame.height != h || frame.width != w {
                return Err(ClipError::FrameShapeMismatch {
                    index,
                    height: frame.height,
                    width: frame.width,
                    expected_height: h,
                    expected_width: w,
                });
            }
        }
        Fps::new(fps.numerator, fps.denominator)?;
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[FrameTensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<FrameTensor> {
        self.frames
    }

    pub fn fps(&self) -> Fps {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> u32 {
        self.frames[0].height
    }

    pub fn width(&self) -> u32 {
        self.frames[0].width
    }

    pub fn first_frame(&self) -> &FrameTensor {
        &self.frames[0]
    }

    /// Copies frames `[start, end)` into a new clip.
    pub fn window(&self, start: usize, end: usize) -> Result<Self, ClipError> {
        if start >= end || end > self.frames.len() {
            return Err(ClipError::WindowOutOfRange {
                start,
                end,
                len: self.frames.len(),
            });
        }
        Ok(Self {
            frames: self.frames[start..end].to_vec(),
            fps: self.fps,
        })
    }

    /// Keeps the frames at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, ClipError> {
        let frames = indices
            .iter()
            .map(|&i| {
                self.frames
                    .get(i)
                    .cloned()
                    .ok_or(ClipError::WindowOutOfRange {
                        start: i,
                        end: i + 1,
                        len: self.frames.len(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(frames, self.fps)
    }

    pub fn payload_len(&self) -> usize {
        self.frames.iter().map(|f| f.data.len()).sum()
    }

    /// Content identifier: SHA-256 over the concatenated frame bytes. Equal to
    /// the id returned when the clip is written as CLIPRAW.
    pub fn content_id(&self) -> ClipId {
        let mut hasher = Sha256::new();
        for frame in &self.frames {
            hasher.update(&frame.data);
        }
        ClipId::from_digest(hasher.finalize().into())
    }
}

impl fmt::Debug for VideoClip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VideoClip")
            .field("frames", &self.frames.len())
            .field("height", &self.height())
            .field("width", &self.width())
            .field("fps", &self.fps)
            .finish()
    }
}

/// Hex-encoded SHA-256 digest of a clip payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClipId(String);

impl ClipId {
    pub fn from_digest(digest: [u8; 32]) -> Self {
        Self(hex::encode(digest))
    }

    /// Parses a 64-character lowercase hex id.
    pub fn parse(s: &str) -> Option<Self> {
        (s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)))
            .then(|| Self(s.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn short(&self) -> &str {
        &self.0[..12.min(self.0.len())]
    }
}

impl fmt::Display for ClipId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lifecycle of a segmented clip. Ordering follows the allowed direction of travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipStatus {
    Ingested,
    RejectedStatic,
    RejectedAbrupt,
    Annotated,
    Reviewed,
    Discarded,
}

impl ClipStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            Self::RejectedStatic | Self::RejectedAbrupt | Self::Reviewed | Self::Discarded
        )
    }

    pub fn can_advance_to(self, next: ClipStatus) -> bool {
        use ClipStatus::*;
        matches!(
            (self, next),
            (Ingested, RejectedStatic)
                | (Ingested, RejectedAbrupt)
                | (Ingested, Annotated)
                | (Annotated, Reviewed)
                | (Annotated, Discarded)
        )
    }
}

/// Motion class used to stratify splits and report metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionCategory {
    Translation,
    Rotation,
    Compound,
    Unknown,
}

const TRANSLATION_WORDS: &[&str] = &[
    "move", "moves", "moving", "fly", "flies", "flying", "forward", "forwards", "backward",
    "backwards", "ascend", "ascends", "ascending", "descend", "descends", "descending", "rise",
    "rises", "climb", "climbs", "approach", "approaches", "advance", "advances", "follow",
    "follows", "track", "tracks", "strafe", "strafes", "sideways", "lift", "lifts", "drop",
    "drops", "lower", "lowers",
];

const ROTATION_WORDS: &[&str] = &[
    "rotate", "rotates", "rotating", "rotation", "turn", "turns", "turning", "yaw", "yaws",
    "spin", "spins", "pan", "pans", "tilt", "tilts", "orbit", "orbits",
];

impl ActionCategory {
    pub const RESOLVED: [ActionCategory; 3] = [Self::Translation, Self::Rotation, Self::Compound];

    /// Keyword classification of an action or intention text.
    pub fn classify(text: &str) -> Self {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let translation = words.iter().any(|w| TRANSLATION_WORDS.contains(w));
        let rotation = words.iter().any(|w| ROTATION_WORDS.contains(w));
        match (translation, rotation) {
            (true, true) => Self::Compound,
            (true, false) => Self::Translation,
            (false, true) => Self::Rotation,
            (false, false) => Self::Unknown,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Translation => "translation",
            Self::Rotation => "rotation",
            Self::Compound => "compound",
            Self::Unknown => "unknown",
        }
    }
}

impl fmt::Display for ActionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One fixed-length window of a source video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: ClipId,
    pub source_video_id: String,
    pub frame_start: usize,
    pub frame_end: usize,
    pub fps: Fps,
    pub resolution: (u32, u32),
    pub motion_stats: MotionStats,
    pub status: ClipStatus,
    pub action_category: ActionCategory,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.frame_end - self.frame_start
    }

    pub fn is_empty(&self) -> bool {
        self.frame_end == self.frame_start
    }

    /// Moves the record forward; backwards or out-of-order transitions are refused.
    pub fn advance(&mut self, next: ClipStatus) -> Result<(), InvalidTransition> {
        if !self.status.can_advance_to(next) {
            return Err(InvalidTransition {
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("clip status cannot move from {from:?} to {to:?}")]
pub struct InvalidTransition {
    pub from: ClipStatus,
    pub to: ClipStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewState {
    Pending,
    Accepted,
    Edited,
    Discarded,
}

/// Intention text for one clip together with its review history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionAnnotation {
    pub clip_id: ClipId,
    pub action_draft: String,
    pub stop_condition_draft: String,
    pub merged_intention: String,
    pub review_state: ReviewState,
    pub reviewer_note: Option<String>,
    pub edit_history: Vec<(DateTime<Utc>, String)>,
}

impl IntentionAnnotation {
    /// The text a manifest should carry, if the annotation is usable.
    pub fn final_intention(&self) -> Option<&str> {
        match self.review_state {
            ReviewState::Accepted | ReviewState::Edited if !self.merged_intention.is_empty() => {
                Some(&self.merged_intention)
            }
            _ => None,
        }
    }
}
