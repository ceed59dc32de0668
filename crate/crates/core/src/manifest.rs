//! Versioned dataset manifests and deterministic stratified splitting.
//!
//! A manifest file is line-delimited JSON: one header line carrying
//! `version` and `parent_version`, then one line per entry.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ActionCategory, ClipId};
use crate::eventlog::{self, EventLogError};
use crate::hashing::StableHasher;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: ClipId,
    pub intention: String,
    pub split: SplitTag,
    pub action_category: ActionCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u64,
    pub parent_version: Option<u64>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    version: u64,
    parent_version: Option<u64>,
    entry_count: usize,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest has no entries")]
    Empty,
    #[error("duplicate clip id {0} in manifest")]
    DuplicateClip(ClipId),
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("entry for clip {0} has no resolved action category")]
    UnresolvedCategory(ClipId),
    #[error("manifest version {0} already exists")]
    VersionExists(u64),
    #[error("manifest version {0} not found")]
    NotFound(u64),
    #[error("parent version {parent} must be an existing version older than {version}")]
    BadParent { version: u64, parent: u64 },
    #[error("manifest file {path} is malformed: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error(transparent)]
    Log(#[from] EventLogError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DatasetManifest {
    pub fn new(version: u64, parent_version: Option<u64>, entries: Vec<ManifestEntry>) -> Result<Self, ManifestError> {
        let m = Self {
            version,
            parent_version,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.clip_id) {
                return Err(ManifestError::DuplicateClip(e.clip_id.clone()));
            }
        }
        if let Some(p) = self.parent_version {
            if p >= self.version {
                return Err(ManifestError::BadParent {
                    version: self.version,
                    parent: p,
                });
            }
        }
        Ok(())
    }

    pub fn with_split(&self, split: SplitTag) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: SplitTag) -> usize {
        self.with_split(split).count()
    }

    /// Digest of the entry list, independent of version numbering.
    pub fn content_digest(&self) -> String {
        let mut h = StableHasher::new("manifest-entries");
        for e in &self.entries {
            h.str(e.clip_id.as_str())
                .str(&e.intention)
                .str(&format!("{:?}", e.split))
                .str(e.action_category.label());
        }
        h.finish_hex()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), ManifestError> {
        self.validate()?;
        let mut lines = Vec::with_capacity(self.entries.len() + 1);
        lines.push(serde_json::to_value(ManifestHeader {
            version: self.version,
            parent_version: self.parent_version,
            entry_count: self.entries.len(),
        })
        .map_err(EventLogError::from)?);
        for e in &self.entries {
            lines.push(serde_json::to_value(e).map_err(EventLogError::from)?);
        }
        eventlog::write_jsonl_atomic(path, &lines)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, ManifestError> {
        let malformed = |reason: String| ManifestError::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(lines.next().ok_or_else(|| malformed("missing header".into()))?)
            .map_err(|e| malformed(format!("header: {e}")))?;
        let entries = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| malformed(format!("entry {i}: {e}"))))
            .collect::<Result<Vec<ManifestEntry>, _>>()?;
        if entries.len() != header.entry_count {
            return Err(malformed(format!(
                "header promises {} entries, found {}",
                header.entry_count,
                entries.len()
            )));
        }
        let m = Self {
            version: header.version,
            parent_version: header.parent_version,
            entries,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Rounds half-up with a small allowance for the representation error of `1 - ratio`.
fn test_count(count: usize, ratio: f64) -> usize {
    let raw = count as f64 * (1.0 - ratio);
    ((raw + 1e-9).round() as usize).clamp(1, count)
}

/// Tags entries train/test, stratified by action category.
///
/// Within each category, `round(count * (1 - ratio))` entries (at least one)
/// become test entries, chosen by a seeded shuffle. Entry order is preserved.
/// The returned manifest is a child of `manifest`.
pub fn split_dataset(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<DatasetManifest, ManifestError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ManifestError::InvalidRatio(ratio));
    }
    if manifest.entries.is_empty() {
        return Err(ManifestError::Empty);
    }
    let mut strata: BTreeMap<ActionCategory, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.action_category == ActionCategory::Unknown {
            return Err(ManifestError::UnresolvedCategory(e.clip_id.clone()));
        }
        strata.entry(e.action_category).or_default().push(i);
    }
    let mut entries = manifest.entries.clone();
    for e in &mut entries {
        e.split = SplitTag::Train;
    }
    for (category, mut idx) in strata {
        let n_test = test_count(idx.len(), ratio);
        let mut rng = ChaCha8Rng::seed_from_u64(
            StableHasher::new("split").u64(seed).str(category.label()).finish_u64(),
        );
        idx.shuffle(&mut rng);
        for &i in &idx[..n_test] {
            entries[i].split = SplitTag::Test;
        }
    }
    Ok(DatasetManifest {
        version: manifest.version + 1,
        parent_version: Some(manifest.version),
        entries,
    })
}

/// Directory of immutable manifest versions, `manifest-v{version:06}.jsonl`.
#[derive(Debug, Clone)]
pub struct ManifestStore {
    dir: PathBuf,
}

impl ManifestStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, version: u64) -> PathBuf {
        self.dir.join(format!("manifest-v{version:06}.jsonl"))
    }

    pub fn versions(&self) -> Result<Vec<u64>, ManifestError> {
        let mut out = Vec::new();
        let rd = match fs::read_dir(&self.dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for entry in rd {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(v) = name
                .strip_prefix("manifest-v")
                .and_then(|r| r.strip_suffix(".jsonl"))
                .and_then(|n| n.parse().ok())
            {
                out.push(v);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn exists(&self, version: u64) -> bool {
        self.path_for(version).exists()
    }

    pub fn read(&self, version: u64) -> Result<DatasetManifest, ManifestError> {
        let path = self.path_for(version);
        if !path.exists() {
            return Err(ManifestError::NotFound(version));
        }
        DatasetManifest::read_jsonl(&path)
    }

    pub fn latest(&self) -> Result<Option<DatasetManifest>, ManifestError> {
        match self.versions()?.last() {
            Some(&v) => self.read(v).map(Some),
            None => Ok(None),
        }
    }

    /// Persists `draft` under the next free version number, keeping its parent.
    /// Versions are never overwritten, so the parent links always form a tree.
    pub fn commit(&self, draft: &DatasetManifest) -> Result<DatasetManifest, ManifestError> {
        let version = self.versions()?.last().map_or(1, |v| v + 1);
        let m = DatasetManifest {
            version,
            parent_version: draft.parent_version,
            entries: draft.entries.clone(),
        };
        if let Some(parent) = m.parent_version {
            if parent >= version || !self.exists(parent) {
                return Err(ManifestError::BadParent { version, parent });
            }
        }
        let path = self.path_for(version);
        if path.exists() {
            return Err(ManifestError::VersionExists(version));
        }
        m.write_jsonl(&path)?;
        Ok(m)
    }
}
