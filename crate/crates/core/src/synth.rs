//! Synthetic frames and sources for tests, demos and the desk-scale micro-corpus.

use std::f64::consts::TAU;
use std::io;
use std::path::{Path, PathBuf};

use crate::clipraw;
use crate::domain::{Fps, FrameTensor, VideoClip};
use crate::hashing::StableHasher;

/// Every frame identical mid-gray.
pub fn static_source(frames: usize, height: u32, width: u32) -> VideoClip {
    let frame = FrameTensor::filled(height, width, [128, 128, 128]).expect("non-zero size");
    VideoClip::new(vec![frame; frames], Fps::default()).expect("uniform frames")
}

/// Gray horizontal ramp scrolling by `step` levels per frame, wrapping at 256.
pub fn moving_gradient(frames: usize, height: u32, width: u32, step: u32, phase: u32) -> VideoClip {
    let frames = (0..frames as u32)
        .map(|t| {
            FrameTensor::from_fn(height, width, |x, _| {
                let v = ((x * step + t * step + phase) % 256) as u8;
                [v, v, v]
            })
            .expect("non-zero size")
        })
        .collect();
    VideoClip::new(frames, Fps::default()).expect("uniform frames")
}

/// Adds 128 (mod 256) to every sample from frame `at` onward. On a gray clip
/// this makes the luminance jump by exactly 128 levels at the cut.
pub fn with_hard_cut(clip: VideoClip, at: usize) -> VideoClip {
    let fps = clip.fps();
    let frames = clip
        .into_frames()
        .into_iter()
        .enumerate()
        .map(|(t, f)| {
            if t < at {
                f
            } else {
                let (h, w) = (f.height(), f.width());
                FrameTensor::new(h, w, f.into_data().into_iter().map(|v| v.wrapping_add(128)).collect())
                    .expect("same size")
            }
        })
        .collect();
    VideoClip::new(frames, fps).expect("uniform frames")
}

/// Smooth colored sinusoid texture with a seed-dependent phase and tint.
pub fn textured_frame(height: u32, width: u32, seed: u64) -> FrameTensor {
    let d = StableHasher::new("synth.texture").u64(seed).digest();
    let phase = |i: usize| f64::from(d[i]) / 256.0 * TAU;
    let (px, py) = (phase(0), phase(1));
    let tint = [d[2] % 48, d[3] % 48, d[4] % 48];
    FrameTensor::from_fn(height, width, |x, y| {
        // The full-frame-period terms keep shifted windows distinct while still wrapping seamlessly.
        let base = 128.0
            + 45.0 * (TAU * f64::from(x) / 16.0 + px).sin()
            + 45.0 * (TAU * f64::from(y) / 16.0 + py).cos()
            + 20.0 * (TAU * f64::from(x) / f64::from(width) + py).sin()
            + 20.0 * (TAU * f64::from(y) / f64::from(height) + px).cos();
        let mut rgb = [0u8; 3];
        for (c, t) in rgb.iter_mut().zip(tint) {
            *c = (base * 0.8 + f64::from(t)).round().clamp(0.0, 255.0) as u8;
        }
        rgb
    })
    .expect("non-zero size")
}

/// Shifts `frame` so the pixel at (x, y) moves to (x + dx, y + dy), wrapping at the borders.
pub fn translate_wrapping(frame: &FrameTensor, dx: i64, dy: i64) -> FrameTensor {
    let (h, w) = (i64::from(frame.height()), i64::from(frame.width()));
    FrameTensor::from_fn(frame.height(), frame.width(), |x, y| {
        let sx = (i64::from(x) - dx).rem_euclid(w) as u32;
        let sy = (i64::from(y) - dy).rem_euclid(h) as u32;
        frame.pixel(sx, sy)
    })
    .expect("same size")
}

/// Frame `t` is `base` translated by `(t * dx, t * dy)`.
pub fn panning(base: &FrameTensor, frames: usize, dx: i64, dy: i64) -> VideoClip {
    let frames = (0..frames as i64)
        .map(|t| translate_wrapping(base, t * dx, t * dy))
        .collect();
    VideoClip::new(frames, Fps::default()).expect("uniform frames")
}

/// Writes `sources` CLIPRAW source files of `frames` frames each into `dir`.
/// Each source pans a distinct texture; the pan direction cycles through
/// up, left, right and diagonal so every motion class is represented.
pub fn micro_corpus(dir: &Path, sources: usize, frames: usize, height: u32, width: u32, seed: u64) -> io::Result<Vec<PathBuf>> {
    const MOTIONS: [(i64, i64); 4] = [(0, -1), (1, 0), (-1, 0), (1, -1)];
    std::fs::create_dir_all(dir)?;
    (0..sources)
        .map(|i| {
            let (dx, dy) = MOTIONS[i % MOTIONS.len()];
            let base = textured_frame(height, width, seed.wrapping_add(i as u64));
            let path = dir.join(format!("source-{i:03}.clipraw"));
            clipraw::write_clipraw(&panning(&base, frames, dx, dy), &path).map_err(io::Error::other)?;
            Ok(path)
        })
        .collect()
}
