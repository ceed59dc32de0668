//! On-disk dataset layout.
//!
//! ```text
//! <root>/clips/<clip_id>.clipraw   content-addressed clips (source windows and generated videos)
//! <root>/records.jsonl             ClipRecord registry
//! <root>/manifests/                versioned manifests
//! <root>/review/events.jsonl       review queue event log
//! <root>/iar/events.jsonl          IAR session event log
//! <root>/selfplay/                 default self-play state directory
//! <root>/eval/                     evaluation reports
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use thiserror::Error;

use crate::clipraw::{self, ClipRawError};
use crate::domain::{ClipId, ClipRecord, VideoClip};
use crate::eventlog::{self, EventLogError};
use crate::manifest::ManifestStore;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("clip {0} not found")]
    NotFound(ClipId),
    #[error(transparent)]
    ClipRaw(#[from] ClipRawError),
    #[error(transparent)]
    Log(#[from] EventLogError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Anything clips can be loaded from by id.
pub trait ClipSource: Send + Sync {
    fn load(&self, id: &ClipId) -> Result<VideoClip, StoreError>;
}

/// Directory of CLIPRAW files named by content digest.
#[derive(Debug, Clone)]
pub struct ClipStore {
    dir: PathBuf,
}

impl ClipStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, id: &ClipId) -> PathBuf {
        self.dir.join(format!("{id}.clipraw"))
    }

    pub fn contains(&self, id: &ClipId) -> bool {
        self.path_for(id).exists()
    }

    /// Stores `clip` under its content id; writing an existing id is a no-op.
    pub fn put(&self, clip: &VideoClip) -> Result<ClipId, StoreError> {
        let id = clip.content_id();
        let path = self.path_for(&id);
        if !path.exists() {
            clipraw::write_clipraw(clip, &path)?;
        }
        Ok(id)
    }
}

impl ClipSource for ClipStore {
    fn load(&self, id: &ClipId) -> Result<VideoClip, StoreError> {
        let path = self.path_for(id);
        if !path.exists() {
            return Err(StoreError::NotFound(id.clone()));
        }
        Ok(clipraw::read_clipraw(&path)?)
    }
}

/// In-memory clip source, mostly for tests and small evaluations.
#[derive(Default)]
pub struct MemoryClipSource {
    clips: RwLock<HashMap<ClipId, VideoClip>>,
}

impl MemoryClipSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, clip: VideoClip) -> ClipId {
        let id = clip.content_id();
        self.clips.write().expect("poisoned").insert(id.clone(), clip);
        id
    }
}

impl ClipSource for MemoryClipSource {
    fn load(&self, id: &ClipId) -> Result<VideoClip, StoreError> {
        self.clips
            .read()
            .expect("poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.clone()))
    }
}

/// ClipRecords keyed by id, persisted as one JSONL file rewritten atomically.
#[derive(Debug, Clone, Default)]
pub struct ClipRegistry {
    records: BTreeMap<ClipId, ClipRecord>,
}

impl ClipRegistry {
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let records = eventlog::read_events::<ClipRecord>(path)?
            .into_iter()
            .map(|r| (r.clip_id.clone(), r))
            .collect();
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let records: Vec<&ClipRecord> = self.records.values().collect();
        eventlog::write_jsonl_atomic(path, &records)?;
        Ok(())
    }

    pub fn upsert(&mut self, record: ClipRecord) {
        self.records.insert(record.clip_id.clone(), record);
    }

    pub fn get(&self, id: &ClipId) -> Option<&ClipRecord> {
        self.records.get(id)
    }

    pub fn get_mut(&mut self, id: &ClipId) -> Option<&mut ClipRecord> {
        self.records.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClipRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_source(&self, source_video_id: &str) -> bool {
        self.records.values().any(|r| r.source_video_id == source_video_id)
    }
}

/// Paths of one dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("clips"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn clips(&self) -> ClipStore {
        ClipStore::new(self.root.join("clips"))
    }

    pub fn manifests(&self) -> ManifestStore {
        ManifestStore::new(self.root.join("manifests"))
    }

    pub fn records_path(&self) -> PathBuf {
        self.root.join("records.jsonl")
    }

    pub fn registry(&self) -> Result<ClipRegistry, StoreError> {
        ClipRegistry::load(&self.records_path())
    }

    pub fn save_registry(&self, registry: &ClipRegistry) -> Result<(), StoreError> {
        registry.save(&self.records_path())
    }

    pub fn review_log_path(&self) -> PathBuf {
        self.root.join("review").join("events.jsonl")
    }

    pub fn iar_log_path(&self) -> PathBuf {
        self.root.join("iar").join("events.jsonl")
    }

    pub fn selfplay_dir(&self) -> PathBuf {
        self.root.join("selfplay")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn pipeline_dir(&self) -> PathBuf {
        self.root.join("pipeline")
    }
}
