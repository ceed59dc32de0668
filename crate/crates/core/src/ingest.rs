//! Source video segmentation and motion-based filtering.
//!
//! Sources are decoded by an external process, cut into fixed-length windows,
//! and each window is scored by mean absolute luminance change between
//! consecutive frames. Windows with a hard cut or with almost no motion are
//! rejected; the rest are written to the clip store.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::clipraw::{self, ClipRawError};
use crate::domain::{ActionCategory, ClipError, ClipRecord, ClipStatus, VideoClip};
use crate::store::{ClipStore, StoreError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("clip_length must be >= 2 and stride >= 1 (got {clip_length}, {stride})")]
    InvalidSegmentation { clip_length: usize, stride: usize },
    #[error("motion statistics need at least two frames")]
    SingleFrame,
    #[error("filter thresholds must satisfy 0 < static ({static_threshold}) < cut ({cut_threshold}) <= 1")]
    InvalidPolicy {
        static_threshold: f64,
        cut_threshold: f64,
    },
    #[error("failed to launch decoder `{command}`: {source}")]
    DecoderLaunch {
        command: String,
        source: std::io::Error,
    },
    #[error("decoder exited with {status} for {source_path}: {stderr}")]
    DecoderFailed {
        source_path: PathBuf,
        status: String,
        stderr: String,
    },
    #[error("decoder produced an invalid stream for {source_path}: {source}")]
    DecoderProtocol {
        source_path: PathBuf,
        source: ClipRawError,
    },
    #[error("decoder produced no frames for {0}")]
    NoFrames(PathBuf),
    #[error("no decoder configured for {0}")]
    NoDecoder(PathBuf),
    #[error(transparent)]
    Clip(#[from] ClipError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Per-pair luminance change statistics of one clip, all normalised to [0, 1].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionStats {
    pub per_pair_diffs: Vec<f64>,
    pub p90_diff: f64,
    pub max_diff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    pub static_threshold: f64,
    pub cut_threshold: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            static_threshold: 0.01,
            cut_threshold: 0.30,
        }
    }
}

impl FilterPolicy {
    pub fn new(static_threshold: f64, cut_threshold: f64) -> Result<Self, IngestError> {
        let p = Self {
            static_threshold,
            cut_threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if 0.0 < self.static_threshold && self.static_threshold < self.cut_threshold && self.cut_threshold <= 1.0 {
            Ok(())
        } else {
            Err(IngestError::InvalidPolicy {
                static_threshold: self.static_threshold,
                cut_threshold: self.cut_threshold,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVerdict {
    Keep,
    RejectedStatic,
    RejectedAbrupt,
}

impl FilterVerdict {
    pub fn status(self) -> ClipStatus {
        match self {
            Self::Keep => ClipStatus::Ingested,
            Self::RejectedStatic => ClipStatus::RejectedStatic,
            Self::RejectedAbrupt => ClipStatus::RejectedAbrupt,
        }
    }
}

/// Half-open frame windows `[i * stride, i * stride + clip_length)` that fit
/// entirely inside `frame_count` frames. Trailing partial windows are dropped.
pub fn segment_video(frame_count: usize, clip_length: usize, stride: usize) -> Result<Vec<(usize, usize)>, IngestError> {
    if clip_length < 2 || stride < 1 {
        return Err(IngestError::InvalidSegmentation { clip_length, stride });
    }
    Ok((0..)
        .map(|i| i * stride)
        .take_while(|start| start + clip_length <= frame_count)
        .map(|start| (start, start + clip_length))
        .collect())
}

/// Nearest-rank percentile of an ascending slice: the value at rank `ceil(p/100 * n)`.
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn motion_stats(clip: &VideoClip) -> Result<MotionStats, IngestError> {
    if clip.len() < 2 {
        return Err(IngestError::SingleFrame);
    }
    let pixels = clip.first_frame().pixel_count() as f64;
    let lumas: Vec<Vec<f64>> = clip.frames().iter().map(|f| f.luma()).collect();
    let per_pair_diffs: Vec<f64> = lumas
        .windows(2)
        .map(|w| {
            let total: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).abs()).sum();
            (total / pixels / 255.0).clamp(0.0, 1.0)
        })
        .collect();
    let mut sorted = per_pair_diffs.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(MotionStats {
        p90_diff: nearest_rank(&sorted, 90.0),
        max_diff: *sorted.last().expect("non-empty"),
        per_pair_diffs,
    })
}

/// The abrupt-change check runs first: a clip with a hard cut is rejected even
/// if it is otherwise static.
pub fn filter_clip(stats: &MotionStats, policy: &FilterPolicy) -> FilterVerdict {
    if stats.max_diff > policy.cut_threshold {
        FilterVerdict::RejectedAbrupt
    } else if stats.p90_diff < policy.static_threshold {
        FilterVerdict::RejectedStatic
    } else {
        FilterVerdict::Keep
    }
}

/// Turns a source file into frames.
pub trait FrameDecoder: Send + Sync {
    fn decode(&self, source: &Path) -> Result<VideoClip, IngestError>;
}

/// Runs `<program> [args...] <source-path>` and reads one CLIPRAW stream from
/// its standard output. A non-zero exit status is a failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubprocessDecoder {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl SubprocessDecoder {
    pub fn new(program: impl Into<String>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
        }
    }

    /// Parses a whitespace-separated command line.
    pub fn from_command_line(cmd: &str) -> Option<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_owned);
        Some(Self {
            program: parts.next()?,
            args: parts.collect(),
        })
    }

    fn display(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl FrameDecoder for SubprocessDecoder {
    fn decode(&self, source: &Path) -> Result<VideoClip, IngestError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(source)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|source| IngestError::DecoderLaunch {
                command: self.display(),
                source,
            })?;
        let mut stderr = child.stderr.take().expect("piped");
        let stderr_reader = thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });
        let mut stdout = std::io::BufReader::new(child.stdout.take().expect("piped"));
        let parsed = clipraw::read_from(&mut stdout);
        // Drain so the exit status reflects the decoder, not a broken pipe.
        let _ = std::io::copy(&mut stdout, &mut std::io::sink());
        drop(stdout);
        let status = child.wait().map_err(|source| IngestError::DecoderLaunch {
            command: self.display(),
            source,
        })?;
        let stderr = stderr_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(IngestError::DecoderFailed {
                source_path: source.to_path_buf(),
                status: status.to_string(),
                stderr: stderr.trim().to_owned(),
            });
        }
        parsed.map_err(|e| match e {
            ClipRawError::Truncated { actual: 0, .. } => IngestError::NoFrames(source.to_path_buf()),
            e => IngestError::DecoderProtocol {
                source_path: source.to_path_buf(),
                source: e,
            },
        })
    }
}

/// Reads `.clipraw` sources directly and hands every other file to an
/// external decoder, if one is configured.
#[derive(Debug, Clone, Default)]
pub struct SourceDecoder {
    pub external: Option<SubprocessDecoder>,
}

impl FrameDecoder for SourceDecoder {
    fn decode(&self, source: &Path) -> Result<VideoClip, IngestError> {
        if source.extension().is_some_and(|e| e == "clipraw") {
            return clipraw::read_clipraw(source).map_err(|e| IngestError::DecoderProtocol {
                source_path: source.to_path_buf(),
                source: e,
            });
        }
        match &self.external {
            Some(d) => d.decode(source),
            None => Err(IngestError::NoDecoder(source.to_path_buf())),
        }
    }
}

/// Regular, non-hidden files directly inside `dir`, sorted by name. A missing
/// directory has no sources.
pub fn list_sources(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let rd = match std::fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && entry.file_type()?.is_file() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub clip_length: usize,
    /// Defaults to `clip_length` (non-overlapping windows).
    pub stride: Option<usize>,
    pub policy: FilterPolicy,
    pub workers: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            clip_length: 129,
            stride: None,
            policy: FilterPolicy::default(),
            workers: 4,
        }
    }
}

impl IngestConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.clip_length)
    }
}

pub fn source_video_id(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Decodes, segments, scores and filters one source. Kept windows are written
/// to `store`; rejected windows get a record but no payload.
pub fn ingest_source(
    source: &Path,
    decoder: &dyn FrameDecoder,
    config: &IngestConfig,
    store: &ClipStore,
) -> Result<Vec<ClipRecord>, IngestError> {
    config.policy.validate()?;
    let video = decoder.decode(source)?;
    let windows = segment_video(video.len(), config.clip_length, config.stride())?;
    let source_id = source_video_id(source);
    let mut records = Vec::with_capacity(windows.len());
    for (start, end) in windows {
        let clip = video.window(start, end)?;
        let stats = motion_stats(&clip)?;
        let verdict = filter_clip(&stats, &config.policy);
        let clip_id = if verdict == FilterVerdict::Keep {
            store.put(&clip)?
        } else {
            clip.content_id()
        };
        debug!(source = %source_id, start, end, ?verdict, p90 = stats.p90_diff, max = stats.max_diff, "window");
        records.push(ClipRecord {
            clip_id,
            source_video_id: source_id.clone(),
            frame_start: start,
            frame_end: end,
            fps: clip.fps(),
            resolution: (clip.height(), clip.width()),
            motion_stats: stats,
            status: verdict.status(),
            action_category: ActionCategory::Unknown,
        });
    }
    info!(source = %source_id, windows = records.len(), kept = records.iter().filter(|r| r.status == ClipStatus::Ingested).count(), "ingested source");
    Ok(records)
}

pub struct SourceOutcome {
    pub source: PathBuf,
    pub result: Result<Vec<ClipRecord>, IngestError>,
}

/// Ingests sources in parallel with at most `config.workers` threads. Output
/// order matches `sources`.
pub fn ingest_sources(
    sources: &[PathBuf],
    decoder: &dyn FrameDecoder,
    config: &IngestConfig,
    store: &ClipStore,
) -> Vec<SourceOutcome> {
    use rayon::prelude::*;
    let run = || {
        sources
            .par_iter()
            .map(|s| SourceOutcome {
                source: s.clone(),
                result: ingest_source(s, decoder, config, store),
            })
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(config.workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}
