//! FID over frame embeddings and FVD over downsampled clip embeddings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use super::frechet::{frechet_distance, gaussian_stats, FrechetError};
use crate::backends::{validate_embeddings, BackendError, Embedder};
use crate::domain::{ClipError, VideoClip};
use crate::imaging;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{side} set is empty")]
    EmptySet { side: &'static str },
    #[error("{side} set has {got} samples, need at least 2")]
    TooFewSamples { side: &'static str, got: usize },
    #[error("clip {index} of the {side} set has {frames} frames, need {target}")]
    ClipTooShort {
        side: &'static str,
        index: usize,
        frames: usize,
        target: usize,
    },
    #[error("target frame count must be >= 1")]
    InvalidTarget,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Frechet(#[from] FrechetError),
    #[error(transparent)]
    Clip(#[from] ClipError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceResult {
    pub value: f64,
    pub generated_samples: usize,
    pub reference_samples: usize,
    pub dim: usize,
}

/// Evenly spaced frame indices `round(i * (n - 1) / (t - 1))` for `i` in `0..t`,
/// with halves rounded up. Always includes the first and last frame when `t >= 2`.
pub fn downsample_indices(n: usize, t: usize) -> Vec<usize> {
    assert!(t >= 1 && n >= t, "downsample {n} frames to {t}");
    if t == 1 {
        return vec![0];
    }
    (0..t).map(|i| (2 * i * (n - 1) + (t - 1)) / (2 * (t - 1))).collect()
}

/// Crops every frame to the target aspect ratio and resizes it to `(height, width)`.
pub fn preprocess(clip: &VideoClip, height: u32, width: u32) -> Result<VideoClip, ClipError> {
    if (clip.height(), clip.width()) == (height, width) {
        return Ok(clip.clone());
    }
    VideoClip::new(
        clip.frames()
            .iter()
            .map(|f| imaging::crop_and_resize(f, height, width))
            .collect(),
        clip.fps(),
    )
}

fn target_resolution(reference: &[VideoClip]) -> Result<(u32, u32), MetricError> {
    reference
        .first()
        .map(|c| (c.height(), c.width()))
        .ok_or(MetricError::EmptySet { side: "reference" })
}

fn check_sample_count(side: &'static str, n: usize, dim: usize) -> Result<(), MetricError> {
    if n < 2 {
        return Err(MetricError::TooFewSamples { side, got: n });
    }
    if n < 10 * dim {
        warn!(side, samples = n, dim, "few samples for the embedding dimension; covariance is poorly estimated");
    }
    Ok(())
}

fn embed_frames_of(
    side: &'static str,
    clips: &[VideoClip],
    embedder: &dyn Embedder,
    size: (u32, u32),
) -> Result<Vec<Vec<f64>>, MetricError> {
    if clips.is_empty() {
        return Err(MetricError::EmptySet { side });
    }
    let per_clip: Vec<Vec<Vec<f64>>> = clips
        .par_iter()
        .map(|c| {
            let c = preprocess(c, size.0, size.1)?;
            Ok(embedder.embed_frames(c.frames())?)
        })
        .collect::<Result<_, MetricError>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}

/// Frame-level Fréchet distance. Generated frames are cropped and resized to
/// the resolution of the first reference clip before embedding.
pub fn compute_fid(generated: &[VideoClip], reference: &[VideoClip], embedder: &dyn Embedder) -> Result<DistanceResult, MetricError> {
    let size = target_resolution(reference)?;
    let gen = embed_frames_of("generated", generated, embedder, size)?;
    let refs = embed_frames_of("reference", reference, embedder, size)?;
    let mut dim = None;
    validate_embeddings(&gen, &mut dim)?;
    validate_embeddings(&refs, &mut dim)?;
    let dim = dim.unwrap_or(0);
    check_sample_count("generated", gen.len(), dim)?;
    check_sample_count("reference", refs.len(), dim)?;
    let value = frechet_distance(&gaussian_stats(&gen)?, &gaussian_stats(&refs)?)?;
    Ok(DistanceResult {
        value,
        generated_samples: gen.len(),
        reference_samples: refs.len(),
        dim,
    })
}

fn embed_videos_of(
    side: &'static str,
    clips: &[VideoClip],
    embedder: &dyn Embedder,
    size: (u32, u32),
    target_frames: usize,
) -> Result<Vec<Vec<f64>>, MetricError> {
    if clips.is_empty() {
        return Err(MetricError::EmptySet { side });
    }
    for (index, c) in clips.iter().enumerate() {
        if c.len() < target_frames {
            return Err(MetricError::ClipTooShort {
                side,
                index,
                frames: c.len(),
                target: target_frames,
            });
        }
    }
    clips
        .par_iter()
        .map(|c| {
            let sampled = c.select(&downsample_indices(c.len(), target_frames))?;
            let sampled = preprocess(&sampled, size.0, size.1)?;
            Ok(embedder.embed_video(&sampled)?)
        })
        .collect()
}

/// Clip-level Fréchet distance after uniform temporal downsampling to `target_frames`.
pub fn compute_fvd(
    generated: &[VideoClip],
    reference: &[VideoClip],
    embedder: &dyn Embedder,
    target_frames: usize,
) -> Result<DistanceResult, MetricError> {
    if target_frames == 0 {
        return Err(MetricError::InvalidTarget);
    }
    let size = target_resolution(reference)?;
    let gen = embed_videos_of("generated", generated, embedder, size, target_frames)?;
    let refs = embed_videos_of("reference", reference, embedder, size, target_frames)?;
    let mut dim = None;
    validate_embeddings(&gen, &mut dim)?;
    validate_embeddings(&refs, &mut dim)?;
    let dim = dim.unwrap_or(0);
    check_sample_count("generated", gen.len(), dim)?;
    check_sample_count("reference", refs.len(), dim)?;
    let value = frechet_distance(&gaussian_stats(&gen)?, &gaussian_stats(&refs)?)?;
    Ok(DistanceResult {
        value,
        generated_samples: gen.len(),
        reference_samples: refs.len(),
        dim,
    })
}
