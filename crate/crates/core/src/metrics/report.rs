//! Per-category evaluation reports.

use std::collections::HashMap;
use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::iar::IarSession;
use super::video::{compute_fid, compute_fvd, MetricError};
use crate::backends::{checked_generate, BackendError, GenerateRequest, Generator};
use crate::domain::{ActionCategory, ClipId, VideoClip};
use crate::hashing::StableHasher;
use crate::manifest::ManifestEntry;
use crate::store::{ClipSource, StoreError};

pub const POOLED_LABEL: &str = "average (pooled)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation pairs")]
    Empty,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub fid: Option<f64>,
    pub fvd: Option<f64>,
    pub iar_percent: Option<f64>,
    pub generated_clips: usize,
    pub reference_clips: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub model_id: Option<String>,
    pub target_frames: usize,
    pub rows: Vec<CategoryRow>,
}

impl EvalReport {
    pub fn row(&self, category: &str) -> Option<&CategoryRow> {
        self.rows.iter().find(|r| r.category == category)
    }

    pub fn pooled(&self) -> Option<&CategoryRow> {
        self.row(POOLED_LABEL)
    }

    /// All present values are finite and IAR lies in [0, 100].
    pub fn is_valid(&self) -> bool {
        self.rows.iter().all(|r| {
            r.fid.is_none_or(f64::is_finite)
                && r.fvd.is_none_or(f64::is_finite)
                && r.iar_percent.is_none_or(|v| (0.0..=100.0).contains(&v))
        })
    }

    /// Aligned text table, one row per category.
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.2}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>12} {:>12} {:>10} {:>6}", "category", "FID ↓", "FVD ↓", "IAR/% ↑", "n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<18} {:>12} {:>12} {:>10} {:>6}",
                r.category,
                fmt(r.fid),
                fmt(r.fvd),
                fmt(r.iar_percent),
                r.generated_clips
            );
        }
        for r in &self.rows {
            for n in &r.notes {
                let _ = writeln!(out, "note [{}]: {n}", r.category);
            }
        }
        out
    }
}

/// A generated clip and the ground-truth clip it should reproduce.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub category: ActionCategory,
    pub intention: String,
    pub generated: VideoClip,
    pub reference: VideoClip,
}

/// Generates one prediction per entry, conditioned on the first frame of the
/// reference clip and shaped like it.
pub fn generate_predictions(
    entries: &[ManifestEntry],
    clips: &dyn ClipSource,
    generator: &dyn Generator,
    model_id: Option<&str>,
    seed: u64,
) -> Result<Vec<EvalPair>, EvalError> {
    use rayon::prelude::*;
    entries
        .par_iter()
        .map(|e| {
            let reference = clips.load(&e.clip_id)?;
            let request = GenerateRequest {
                observation: reference.first_frame().clone(),
                prompt: e.intention.clone(),
                seed: StableHasher::new("eval.seed").u64(seed).str(e.clip_id.as_str()).finish_u64(),
                num_frames: reference.len() as u32,
                height: reference.height(),
                width: reference.width(),
                model_id: model_id.map(str::to_owned),
            };
            let generated = checked_generate(generator, &request)?;
            Ok(EvalPair {
                category: e.action_category,
                intention: e.intention.clone(),
                generated,
                reference,
            })
        })
        .collect()
}

fn is_sample_shortage(e: &MetricError) -> bool {
    matches!(e, MetricError::TooFewSamples { .. } | MetricError::EmptySet { .. })
}

fn metric_row(
    label: &str,
    pairs: &[&EvalPair],
    embedder: &dyn crate::backends::Embedder,
    target_frames: usize,
) -> Result<CategoryRow, EvalError> {
    let generated: Vec<VideoClip> = pairs.iter().map(|p| p.generated.clone()).collect();
    let reference: Vec<VideoClip> = pairs.iter().map(|p| p.reference.clone()).collect();
    let mut notes = Vec::new();
    let mut keep = |name: &str, r: Result<f64, MetricError>| -> Result<Option<f64>, EvalError> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(e) if is_sample_shortage(&e) => {
                notes.push(format!("{name} not computed: {e}"));
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    };
    let fid = keep("FID", compute_fid(&generated, &reference, embedder).map(|r| r.value))?;
    let fvd = keep("FVD", compute_fvd(&generated, &reference, embedder, target_frames).map(|r| r.value))?;
    Ok(CategoryRow {
        category: label.to_owned(),
        fid,
        fvd,
        iar_percent: None,
        generated_clips: generated.len(),
        reference_clips: reference.len(),
        notes,
    })
}

/// IAR restricted to the items whose generated clip belongs to `ids`.
fn iar_over(session: &IarSession, ids: Option<&[ClipId]>) -> Option<f64> {
    let mut total = 0usize;
    let mut aligned = 0usize;
    for (item, j) in session.items.iter().zip(&session.judgments) {
        if ids.is_some_and(|ids| !ids.contains(&item.video_ref)) {
            continue;
        }
        total += 1;
        match j {
            Some(true) => aligned += 1,
            Some(false) => {}
            None => return None,
        }
    }
    (total > 0).then(|| 100.0 * aligned as f64 / total as f64)
}

/// Per-category and pooled FID / FVD, plus IAR when a completed session is given.
/// Categories without enough samples get empty cells and a note.
pub fn evaluate(
    pairs: &[EvalPair],
    embedder: &dyn crate::backends::Embedder,
    target_frames: usize,
    iar: Option<&IarSession>,
) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut by_cat: HashMap<ActionCategory, Vec<&EvalPair>> = HashMap::new();
    for p in pairs {
        by_cat.entry(p.category).or_default().push(p);
    }
    let mut rows = Vec::new();
    for cat in ActionCategory::RESOLVED {
        let members = by_cat.get(&cat).cloned().unwrap_or_default();
        let mut row = if members.is_empty() {
            CategoryRow {
                category: cat.label().to_owned(),
                fid: None,
                fvd: None,
                iar_percent: None,
                generated_clips: 0,
                reference_clips: 0,
                notes: vec!["no test clips in this category".into()],
            }
        } else {
            metric_row(cat.label(), &members, embedder, target_frames)?
        };
        if let Some(s) = iar {
            let ids: Vec<ClipId> = members.iter().map(|p| p.generated.content_id()).collect();
            row.iar_percent = iar_over(s, Some(&ids));
        }
        rows.push(row);
    }
    let all: Vec<&EvalPair> = pairs.iter().collect();
    let mut pooled = metric_row(POOLED_LABEL, &all, embedder, target_frames)?;
    if let Some(s) = iar {
        pooled.iar_percent = iar_over(s, None);
        if pooled.iar_percent.is_none() {
            pooled.notes.push("IAR session incomplete".into());
        }
    }
    rows.push(pooled);
    Ok(EvalReport {
        created_at: Utc::now(),
        model_id: None,
        target_frames,
        rows,
    })
}
