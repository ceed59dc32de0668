//! Chain-of-thought intention drafting and the human review queue.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::backends::{BackendError, CotStep, Critic, DraftRequest};
use crate::domain::{ActionCategory, ClipId, ClipRecord, ClipStatus, IntentionAnnotation, ReviewState, VideoClip};
use crate::eventlog::{EventLog, EventLogError};
use crate::hashing::StableHasher;
use crate::manifest::{split_dataset, DatasetManifest, ManifestEntry, ManifestError, ManifestStore, SplitTag};
use crate::store::{ClipRegistry, ClipSource, StoreError};
use crate::templates::{self, TemplateSet};

pub const DEFAULT_LEASE_MINUTES: i64 = 30;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("critic returned an empty {0:?} twice")]
    EmptyField(CotStep),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotDraft {
    pub action: String,
    pub stop_condition: String,
    pub merged_intention: String,
    pub model_id: String,
    pub prompt_template_id: String,
}

impl CotDraft {
    /// Category of the drafted motion, preferring the action phrase.
    pub fn category(&self) -> ActionCategory {
        match ActionCategory::classify(&self.action) {
            ActionCategory::Unknown => ActionCategory::classify(&self.merged_intention),
            c => c,
        }
    }
}

fn draft_step(
    clip: &VideoClip,
    critic: &dyn Critic,
    step: CotStep,
    template_id: &str,
    prompt: String,
    prior: (Option<&str>, Option<&str>),
) -> Result<(String, String), AnnotateError> {
    let request = DraftRequest {
        step,
        template_id: template_id.to_owned(),
        prompt,
        action: prior.0.map(str::to_owned),
        stop_condition: prior.1.map(str::to_owned),
    };
    for attempt in 0..2 {
        let reply = critic.draft(clip, &request)?;
        let text = reply.text.trim();
        if !text.is_empty() {
            return Ok((text.to_owned(), reply.model_id));
        }
        warn!(?step, attempt, "critic returned an empty field");
    }
    Err(AnnotateError::EmptyField(step))
}

/// Three critic calls in order: action, stopping condition, merged intention.
/// An empty answer is asked for once more before failing.
pub fn draft_intention(clip: &VideoClip, critic: &dyn Critic, templates: &TemplateSet) -> Result<CotDraft, AnnotateError> {
    let (action, model_id) = draft_step(
        clip,
        critic,
        CotStep::Action,
        templates::COT_ACTION,
        templates.render(templates::COT_ACTION, &[]),
        (None, None),
    )?;
    let (stop_condition, _) = draft_step(
        clip,
        critic,
        CotStep::StopCondition,
        templates::COT_STOP,
        templates.render(templates::COT_STOP, &[("action", &action)]),
        (Some(&action), None),
    )?;
    let (merged_intention, _) = draft_step(
        clip,
        critic,
        CotStep::Merge,
        templates::COT_MERGE,
        templates.render(templates::COT_MERGE, &[("action", &action), ("stop_condition", &stop_condition)]),
        (Some(&action), Some(&stop_condition)),
    )?;
    let draft = CotDraft {
        action,
        stop_condition,
        merged_intention,
        model_id,
        prompt_template_id: format!("{}+{}+{}", templates::COT_ACTION, templates::COT_STOP, templates::COT_MERGE),
    };
    let a = ActionCategory::classify(&draft.action);
    let m = ActionCategory::classify(&draft.merged_intention);
    if a != m {
        warn!(action = %draft.action, merged = %draft.merged_intention, "merged intention changes the action class");
    }
    Ok(draft)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReviewError {
    #[error("clip {0} is not annotated")]
    NotAnnotated(ClipId),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task {0} is already resolved")]
    AlreadyResolved(String),
    #[error("task {task_id} is claimed by {claimant}")]
    ClaimedByOther { task_id: String, claimant: String },
    #[error("an edit needs text that differs from the draft")]
    InvalidEdit,
    #[error("event log: {0}")]
    Log(String),
}

impl From<EventLogError> for ReviewError {
    fn from(e: EventLogError) -> Self {
        Self::Log(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Claimed,
    Accepted,
    Edited,
    Discarded,
}

impl TaskState {
    pub fn is_resolved(self) -> bool {
        matches!(self, Self::Accepted | Self::Edited | Self::Discarded)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    #[serde(alias = "accept")]
    Accepted,
    #[serde(alias = "edit")]
    Edited,
    #[serde(alias = "discard")]
    Discarded,
}

impl From<Verdict> for TaskState {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Accepted => Self::Accepted,
            Verdict::Edited => Self::Edited,
            Verdict::Discarded => Self::Discarded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub clip_id: ClipId,
    pub draft: CotDraft,
    pub state: TaskState,
    pub claimant: Option<String>,
    pub claimed_at: Option<DateTime<Utc>>,
    pub resolution_text: Option<String>,
    pub created_at: DateTime<Utc>,
    pub resolved_at: Option<DateTime<Utc>>,
}

impl ReviewTask {
    /// Intention the manifest should carry, once the task is resolved.
    pub fn final_intention(&self) -> Option<&str> {
        match self.state {
            TaskState::Accepted => Some(&self.draft.merged_intention),
            TaskState::Edited => self.resolution_text.as_deref(),
            _ => None,
        }
    }

    pub fn to_annotation(&self) -> IntentionAnnotation {
        let review_state = match self.state {
            TaskState::Pending | TaskState::Claimed => ReviewState::Pending,
            TaskState::Accepted => ReviewState::Accepted,
            TaskState::Edited => ReviewState::Edited,
            TaskState::Discarded => ReviewState::Discarded,
        };
        let mut edit_history = vec![(self.created_at, self.draft.merged_intention.clone())];
        if let (TaskState::Edited, Some(text), Some(at)) = (self.state, &self.resolution_text, self.resolved_at) {
            edit_history.push((at, text.clone()));
        }
        IntentionAnnotation {
            clip_id: self.clip_id.clone(),
            action_draft: self.draft.action.clone(),
            stop_condition_draft: self.draft.stop_condition.clone(),
            merged_intention: self.final_intention().unwrap_or(&self.draft.merged_intention).to_owned(),
            review_state,
            reviewer_note: self.claimant.clone(),
            edit_history,
        }
    }
}

pub fn task_id_for(clip_id: &ClipId) -> String {
    format!("rt-{}", &StableHasher::new("review.task").str(clip_id.as_str()).finish_hex()[..16])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ReviewEvent {
    Enqueued {
        at: DateTime<Utc>,
        task_id: String,
        clip_id: ClipId,
        draft: CotDraft,
    },
    Claimed {
        at: DateTime<Utc>,
        task_id: String,
        reviewer: String,
    },
    Resolved {
        at: DateTime<Utc>,
        task_id: String,
        verdict: Verdict,
        text: Option<String>,
        reviewer: String,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub total: usize,
    pub pending: usize,
    pub claimed: usize,
    pub accepted: usize,
    pub edited: usize,
    pub discarded: usize,
}

impl QueueStats {
    pub fn resolved(&self) -> usize {
        self.accepted + self.edited + self.discarded
    }
}

#[derive(Debug, Default)]
struct QueueState {
    tasks: BTreeMap<String, ReviewTask>,
    by_clip: BTreeMap<ClipId, String>,
}

impl QueueState {
    fn apply(&mut self, event: &ReviewEvent, lease: Duration) -> Result<(), ReviewError> {
        match event {
            ReviewEvent::Enqueued {
                at,
                task_id,
                clip_id,
                draft,
            } => {
                self.by_clip.insert(clip_id.clone(), task_id.clone());
                self.tasks.insert(
                    task_id.clone(),
                    ReviewTask {
                        task_id: task_id.clone(),
                        clip_id: clip_id.clone(),
                        draft: draft.clone(),
                        state: TaskState::Pending,
                        claimant: None,
                        claimed_at: None,
                        resolution_text: None,
                        created_at: *at,
                        resolved_at: None,
                    },
                );
            }
            ReviewEvent::Claimed { at, task_id, reviewer } => {
                let task = self.task_mut(task_id)?;
                check_open(task, reviewer, *at, lease)?;
                task.state = TaskState::Claimed;
                task.claimant = Some(reviewer.clone());
                task.claimed_at = Some(*at);
            }
            ReviewEvent::Resolved {
                at,
                task_id,
                verdict,
                text,
                reviewer,
            } => {
                let task = self.task_mut(task_id)?;
                check_open(task, reviewer, *at, lease)?;
                if *verdict == Verdict::Edited {
                    match text.as_deref().map(str::trim) {
                        Some(t) if !t.is_empty() && t != task.draft.merged_intention.trim() => {}
                        _ => return Err(ReviewError::InvalidEdit),
                    }
                }
                task.state = (*verdict).into();
                task.claimant = Some(reviewer.clone());
                task.resolution_text = match verdict {
                    Verdict::Edited => text.as_deref().map(|t| t.trim().to_owned()),
                    _ => None,
                };
                task.resolved_at = Some(*at);
            }
        }
        Ok(())
    }

    fn task_mut(&mut self, task_id: &str) -> Result<&mut ReviewTask, ReviewError> {
        self.tasks
            .get_mut(task_id)
            .ok_or_else(|| ReviewError::UnknownTask(task_id.to_owned()))
    }
}

fn lease_live(task: &ReviewTask, now: DateTime<Utc>, lease: Duration) -> bool {
    task.state == TaskState::Claimed && task.claimed_at.is_some_and(|t| now - t < lease)
}

/// A task may be claimed or resolved by `reviewer` if it is unresolved and not
/// under somebody else's live lease.
fn check_open(task: &ReviewTask, reviewer: &str, now: DateTime<Utc>, lease: Duration) -> Result<(), ReviewError> {
    if task.state.is_resolved() {
        return Err(ReviewError::AlreadyResolved(task.task_id.clone()));
    }
    if lease_live(task, now, lease) {
        if let Some(c) = task.claimant.as_deref().filter(|c| *c != reviewer) {
            return Err(ReviewError::ClaimedByOther {
                task_id: task.task_id.clone(),
                claimant: c.to_owned(),
            });
        }
    }
    Ok(())
}

/// Review tasks persisted as an append-only event log. The log is the source of
/// truth; clip statuses and manifests are derived from it.
pub struct ReviewQueue {
    log: EventLog<ReviewEvent>,
    state: QueueState,
    lease: Duration,
}

impl ReviewQueue {
    pub fn open(path: &Path) -> Result<Self, ReviewError> {
        Self::open_with_lease(path, Duration::minutes(DEFAULT_LEASE_MINUTES))
    }

    pub fn open_with_lease(path: &Path, lease: Duration) -> Result<Self, ReviewError> {
        let (log, events) = EventLog::open(path)?;
        let mut state = QueueState::default();
        for e in &events {
            state.apply(e, lease)?;
        }
        Ok(Self { log, state, lease })
    }

    fn record(&mut self, event: ReviewEvent) -> Result<(), ReviewError> {
        // Validate against a scratch copy of the affected task before logging.
        let mut probe = QueueState::default();
        if let ReviewEvent::Claimed { task_id, .. } | ReviewEvent::Resolved { task_id, .. } = &event {
            probe.tasks.insert(task_id.clone(), self.state.task_mut(task_id)?.clone());
        }
        probe.apply(&event, self.lease)?;
        self.log.append(&event)?;
        self.state.apply(&event, self.lease)
    }

    pub fn get(&self, task_id: &str) -> Option<&ReviewTask> {
        self.state.tasks.get(task_id)
    }

    pub fn task_for_clip(&self, clip_id: &ClipId) -> Option<&ReviewTask> {
        self.state.by_clip.get(clip_id).and_then(|t| self.state.tasks.get(t))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &ReviewTask> {
        self.state.tasks.values()
    }

    /// Creates a pending task for an annotated clip. A clip that already has a
    /// task gets that task back, whatever its state.
    pub fn enqueue(&mut self, record: &ClipRecord, draft: CotDraft) -> Result<ReviewTask, ReviewError> {
        if let Some(t) = self.task_for_clip(&record.clip_id) {
            return Ok(t.clone());
        }
        if record.status != ClipStatus::Annotated {
            return Err(ReviewError::NotAnnotated(record.clip_id.clone()));
        }
        let task_id = task_id_for(&record.clip_id);
        self.record(ReviewEvent::Enqueued {
            at: Utc::now(),
            task_id: task_id.clone(),
            clip_id: record.clip_id.clone(),
            draft,
        })?;
        Ok(self.state.tasks[&task_id].clone())
    }

    pub fn claim(&mut self, reviewer: &str) -> Result<Option<ReviewTask>, ReviewError> {
        self.claim_at(reviewer, Utc::now())
    }

    /// Returns the reviewer's live claim if there is one, otherwise claims the
    /// oldest task that is pending or whose lease has lapsed.
    pub fn claim_at(&mut self, reviewer: &str, now: DateTime<Utc>) -> Result<Option<ReviewTask>, ReviewError> {
        let lease = self.lease;
        let mut open: Vec<&ReviewTask> = self
            .state
            .tasks
            .values()
            .filter(|t| !t.state.is_resolved())
            .collect();
        if let Some(mine) = open
            .iter()
            .find(|t| lease_live(t, now, lease) && t.claimant.as_deref() == Some(reviewer))
        {
            return Ok(Some((*mine).clone()));
        }
        open.retain(|t| !lease_live(t, now, lease));
        open.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.task_id.cmp(&b.task_id)));
        let Some(task_id) = open.first().map(|t| t.task_id.clone()) else {
            return Ok(None);
        };
        self.record(ReviewEvent::Claimed {
            at: now,
            task_id: task_id.clone(),
            reviewer: reviewer.to_owned(),
        })?;
        Ok(Some(self.state.tasks[&task_id].clone()))
    }

    pub fn apply_review(&mut self, task_id: &str, verdict: Verdict, text: Option<&str>, reviewer: &str) -> Result<ReviewTask, ReviewError> {
        self.apply_review_at(task_id, verdict, text, reviewer, Utc::now())
    }

    pub fn apply_review_at(
        &mut self,
        task_id: &str,
        verdict: Verdict,
        text: Option<&str>,
        reviewer: &str,
        now: DateTime<Utc>,
    ) -> Result<ReviewTask, ReviewError> {
        self.record(ReviewEvent::Resolved {
            at: now,
            task_id: task_id.to_owned(),
            verdict,
            text: text.map(str::to_owned),
            reviewer: reviewer.to_owned(),
        })?;
        Ok(self.state.tasks[task_id].clone())
    }

    pub fn stats(&self) -> QueueStats {
        self.stats_at(Utc::now())
    }

    /// Counts by state; claims whose lease has lapsed count as pending.
    pub fn stats_at(&self, now: DateTime<Utc>) -> QueueStats {
        let mut s = QueueStats::default();
        for t in self.state.tasks.values() {
            s.total += 1;
            match t.state {
                TaskState::Pending => s.pending += 1,
                TaskState::Claimed if lease_live(t, now, self.lease) => s.claimed += 1,
                TaskState::Claimed => s.pending += 1,
                TaskState::Accepted => s.accepted += 1,
                TaskState::Edited => s.edited += 1,
                TaskState::Discarded => s.discarded += 1,
            }
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub drafted: usize,
    pub already_queued: usize,
    pub failed: Vec<(ClipId, String)>,
    pub auto_accepted: usize,
}

/// Drafts an intention for every ingested clip without a review task and
/// enqueues it. Clips that already have a task are not sent to the critic again.
pub fn annotate_clips(
    registry: &mut ClipRegistry,
    clips: &dyn ClipSource,
    critic: &dyn Critic,
    templates: &TemplateSet,
    queue: &mut ReviewQueue,
    workers: usize,
) -> Result<AnnotateSummary, AnnotateError> {
    let mut summary = AnnotateSummary::default();
    let mut todo = Vec::new();
    for r in registry.iter() {
        if !matches!(r.status, ClipStatus::Ingested | ClipStatus::Annotated) {
            continue;
        }
        if queue.task_for_clip(&r.clip_id).is_some() {
            summary.already_queued += 1;
        } else {
            todo.push(r.clip_id.clone());
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let drafts: Vec<(ClipId, Result<CotDraft, AnnotateError>)> = pool.install(|| {
        todo.par_iter()
            .map(|id| {
                let r = clips
                    .load(id)
                    .map_err(AnnotateError::from)
                    .and_then(|clip| draft_intention(&clip, critic, templates));
                (id.clone(), r)
            })
            .collect()
    });
    for (id, draft) in drafts {
        match draft {
            Ok(draft) => {
                let record = registry.get_mut(&id).expect("listed above");
                record.action_category = draft.category();
                if record.status == ClipStatus::Ingested {
                    record.advance(ClipStatus::Annotated).expect("ingested clips can be annotated");
                }
                queue.enqueue(record, draft)?;
                summary.drafted += 1;
            }
            Err(e) => {
                warn!(clip = %id, error = %e, "drafting failed");
                summary.failed.push((id, e.to_string()));
            }
        }
    }
    sync_registry(queue, registry);
    info!(drafted = summary.drafted, failed = summary.failed.len(), "annotation pass done");
    Ok(summary)
}

/// Accepts every open task as drafted. For running without human reviewers.
pub fn auto_accept(queue: &mut ReviewQueue, reviewer: &str) -> Result<usize, ReviewError> {
    let open: Vec<String> = queue
        .tasks()
        .filter(|t| !t.state.is_resolved())
        .map(|t| t.task_id.clone())
        .collect();
    for id in &open {
        queue.apply_review(id, Verdict::Accepted, None, reviewer)?;
    }
    Ok(open.len())
}

/// Brings clip statuses and categories in line with the queue. Idempotent, so
/// it can be re-run after a crash between logging a resolution and saving records.
pub fn sync_registry(queue: &ReviewQueue, registry: &mut ClipRegistry) -> usize {
    let mut changed = 0;
    for task in queue.tasks() {
        let Some(record) = registry.get_mut(&task.clip_id) else {
            continue;
        };
        if record.status == ClipStatus::Ingested {
            record.status = ClipStatus::Annotated;
            record.action_category = task.draft.category();
            changed += 1;
        }
        let next = match task.state {
            TaskState::Accepted | TaskState::Edited => ClipStatus::Reviewed,
            TaskState::Discarded => ClipStatus::Discarded,
            _ => continue,
        };
        if record.status == ClipStatus::Annotated {
            if let Some(text) = task.resolution_text.as_deref() {
                let c = ActionCategory::classify(text);
                if c != ActionCategory::Unknown {
                    record.action_category = c;
                }
            }
            record.advance(next).expect("annotated clips can be resolved");
            changed += 1;
        }
    }
    changed
}

/// Manifest entries for every accepted or edited task whose motion class is
/// known. Entries come out in clip-id order, all tagged train.
pub fn reviewed_entries(queue: &ReviewQueue, registry: &ClipRegistry) -> Vec<ManifestEntry> {
    let mut out: Vec<ManifestEntry> = queue
        .tasks()
        .filter_map(|t| {
            let intention = t.final_intention()?;
            let category = registry
                .get(&t.clip_id)
                .map(|r| r.action_category)
                .filter(|c| *c != ActionCategory::Unknown)
                .unwrap_or_else(|| ActionCategory::classify(intention));
            if category == ActionCategory::Unknown {
                warn!(clip = %t.clip_id, "reviewed clip has no motion class; left out of the manifest");
                return None;
            }
            Some(ManifestEntry {
                clip_id: t.clip_id.clone(),
                intention: intention.to_owned(),
                split: SplitTag::Train,
                action_category: category,
            })
        })
        .collect();
    out.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    out
}

/// True for manifests built from reviewed clips, as opposed to synthetic ones.
pub fn is_reviewed_manifest(m: &DatasetManifest) -> bool {
    m.count(SplitTag::Synthetic) == 0 && m.count(SplitTag::Train) > 0
}

pub fn latest_reviewed(store: &ManifestStore) -> Result<Option<DatasetManifest>, ManifestError> {
    for v in store.versions()?.into_iter().rev() {
        let m = store.read(v)?;
        if is_reviewed_manifest(&m) {
            return Ok(Some(m));
        }
    }
    Ok(None)
}

/// Commits a split manifest of all reviewed clips, unless the newest reviewed
/// manifest already has the same content. Returns the current reviewed manifest.
pub fn publish_manifest(
    queue: &ReviewQueue,
    registry: &ClipRegistry,
    store: &ManifestStore,
    ratio: f64,
    seed: u64,
) -> Result<Option<DatasetManifest>, ManifestError> {
    let entries = reviewed_entries(queue, registry);
    if entries.is_empty() {
        return Ok(None);
    }
    let base = DatasetManifest {
        version: 0,
        parent_version: None,
        entries,
    };
    let mut split = split_dataset(&base, ratio, seed)?;
    let previous = latest_reviewed(store)?;
    if let Some(prev) = &previous {
        if prev.content_digest() == split.content_digest() {
            return Ok(previous);
        }
    }
    split.parent_version = previous.map(|p| p.version);
    store.commit(&split).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockCritic;
    use crate::backends::{Capabilities, DraftReply, ExpandReply, ExpandRequest, RubricScores, ScoreRequest};
    use crate::domain::{FrameTensor, Fps};
    use crate::ingest::MotionStats;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn clip(seed: u8) -> VideoClip {
        VideoClip::new(vec![FrameTensor::filled(4, 4, [seed, 0, 0]).unwrap(); 3], Fps::default()).unwrap()
    }

    fn record(c: &VideoClip, status: ClipStatus) -> ClipRecord {
        ClipRecord {
            clip_id: c.content_id(),
            source_video_id: "src".into(),
            frame_start: 0,
            frame_end: c.len(),
            fps: c.fps(),
            resolution: (c.height(), c.width()),
            motion_stats: MotionStats::default(),
            status,
            action_category: ActionCategory::Unknown,
        }
    }

    #[test]
    fn canned_response_merges_into_one_sentence() {
        let critic = MockCritic::new(0).with_canned_draft("move forward", "until near the blue building");
        let d = draft_intention(&clip(1), &critic, &TemplateSet::builtin()).unwrap();
        assert_eq!(d.merged_intention, "The drone moves forward until it approaches the blue building.");
        assert_eq!(d.action, "move forward");
        assert_eq!(d.model_id, "mock-critic");
        assert_eq!(d.category(), ActionCategory::Translation);
    }

    #[test]
    fn drafts_are_deterministic() {
        let t = TemplateSet::builtin();
        let a = draft_intention(&clip(3), &MockCritic::new(5), &t).unwrap();
        let b = draft_intention(&clip(3), &MockCritic::new(5), &t).unwrap();
        assert_eq!(a, b);
        assert!(!a.action.is_empty() && !a.stop_condition.is_empty() && !a.merged_intention.is_empty());
    }

    struct EmptyAction {
        calls: AtomicUsize,
    }

    impl Critic for EmptyAction {
        fn capabilities(&self) -> Result<Capabilities, BackendError> {
            MockCritic::default().capabilities()
        }
        fn score(&self, _: &[&VideoClip], _: &ScoreRequest) -> Result<Vec<RubricScores>, BackendError> {
            unimplemented!()
        }
        fn draft(&self, _: &VideoClip, _: &DraftRequest) -> Result<DraftReply, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(DraftReply {
                text: "  ".into(),
                model_id: "m".into(),
            })
        }
        fn expand(&self, _: &FrameTensor, _: &ExpandRequest) -> Result<ExpandReply, BackendError> {
            unimplemented!()
        }
    }

    #[test]
    fn empty_field_is_retried_once() {
        let critic = EmptyAction {
            calls: AtomicUsize::new(0),
        };
        let err = draft_intention(&clip(0), &critic, &TemplateSet::builtin()).unwrap_err();
        assert!(matches!(err, AnnotateError::EmptyField(CotStep::Action)));
        assert_eq!(critic.calls.load(Ordering::SeqCst), 2);
    }

    fn draft(text: &str) -> CotDraft {
        CotDraft {
            action: "move forward".into(),
            stop_condition: "until near the gate".into(),
            merged_intention: text.into(),
            model_id: "m".into(),
            prompt_template_id: "t".into(),
        }
    }

    #[test]
    fn enqueue_is_idempotent_and_guarded() {
        let dir = tempfile::tempdir().unwrap();
        let mut q = ReviewQueue::open(&dir.path().join("q.jsonl")).unwrap();
        let c = clip(1);
        assert_eq!(
            q.enqueue(&record(&c, ClipStatus::Ingested), draft("x")),
            Err(ReviewError::NotAnnotated(c.content_id()))
        );
        let r = record(&c, ClipStatus::Annotated);
        let a = q.enqueue(&r, draft("The drone moves forward.")).unwrap();
        let b = q.enqueue(&r, draft("other")).unwrap();
        assert_eq!(a.task_id, b.task_id);
        assert_eq!(a.state, TaskState::Pending);
        assert_eq!(q.stats().total, 1);
    }

    #[test]
    fn resolutions_are_final_and_edits_checked() {
        let dir = tempfile::tempdir().unwrap();
        let mut q = ReviewQueue::open(&dir.path().join("q.jsonl")).unwrap();
        let t1 = q.enqueue(&record(&clip(1), ClipStatus::Annotated), draft("The drone moves forward.")).unwrap();
        let t2 = q.enqueue(&record(&clip(2), ClipStatus::Annotated), draft("The drone moves forward.")).unwrap();
        assert_eq!(
            q.apply_review(&t1.task_id, Verdict::Edited, Some("The drone moves forward."), "r"),
            Err(ReviewError::InvalidEdit)
        );
        assert_eq!(q.apply_review(&t1.task_id, Verdict::Edited, None, "r"), Err(ReviewError::InvalidEdit));
        let done = q
            .apply_review(&t1.task_id, Verdict::Edited, Some("Rotate 90 degrees to the left."), "r")
            .unwrap();
        assert_eq!(done.final_intention(), Some("Rotate 90 degrees to the left."));
        assert_eq!(
            q.apply_review(&t1.task_id, Verdict::Accepted, None, "r"),
            Err(ReviewError::AlreadyResolved(t1.task_id.clone()))
        );
        let acc = q.apply_review(&t2.task_id, Verdict::Accepted, None, "r").unwrap();
        assert_eq!(acc.final_intention(), Some("The drone moves forward."));
        let ann = done.to_annotation();
        assert_eq!(ann.review_state, ReviewState::Edited);
        assert_eq!(ann.edit_history.len(), 2);
        assert_eq!(ann.final_intention(), Some("Rotate 90 degrees to the left."));
    }

    #[test]
    fn leases_expire_and_block_others_while_live() {
        let dir = tempfile::tempdir().unwrap();
        let mut q = ReviewQueue::open(&dir.path().join("q.jsonl")).unwrap();
        let t = q.enqueue(&record(&clip(1), ClipStatus::Annotated), draft("d")).unwrap();
        let t0 = Utc::now();
        let a = q.claim_at("alice", t0).unwrap().unwrap();
        assert_eq!(a.task_id, t.task_id);
        assert_eq!(q.claim_at("alice", t0).unwrap().unwrap().task_id, t.task_id);
        assert_eq!(q.claim_at("bob", t0 + Duration::minutes(5)).unwrap(), None);
        assert!(matches!(
            q.apply_review_at(&t.task_id, Verdict::Accepted, None, "bob", t0 + Duration::minutes(5)),
            Err(ReviewError::ClaimedByOther { .. })
        ));
        let s = q.stats_at(t0 + Duration::minutes(5));
        assert_eq!((s.pending, s.claimed), (0, 1));
        let later = t0 + Duration::minutes(31);
        assert_eq!(q.stats_at(later).pending, 1);
        let b = q.claim_at("bob", later).unwrap().unwrap();
        assert_eq!(b.claimant.as_deref(), Some("bob"));
        q.apply_review_at(&t.task_id, Verdict::Discarded, None, "bob", later).unwrap();
        assert_eq!(q.claim_at("carol", later).unwrap(), None);
    }

    #[test]
    fn replay_reproduces_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let (tasks, stats) = {
            let mut q = ReviewQueue::open(&path).unwrap();
            for i in 0..5 {
                q.enqueue(&record(&clip(i), ClipStatus::Annotated), draft("The drone rises.")).unwrap();
            }
            let c = q.claim("r1").unwrap().unwrap();
            q.apply_review(&c.task_id, Verdict::Accepted, None, "r1").unwrap();
            q.claim("r2").unwrap().unwrap();
            let _ = q.apply_review(&c.task_id, Verdict::Discarded, None, "r1");
            (q.tasks().cloned().collect::<Vec<_>>(), q.stats())
        };
        let q = ReviewQueue::open(&path).unwrap();
        assert_eq!(q.tasks().cloned().collect::<Vec<_>>(), tasks);
        assert_eq!(q.stats(), stats);
        assert_eq!(stats.pending + stats.claimed + stats.resolved(), stats.total);
    }

    #[test]
    fn verdicts_parse_short_forms() {
        assert_eq!(serde_json::from_str::<Verdict>("\"accept\"").unwrap(), Verdict::Accepted);
        assert_eq!(serde_json::from_str::<Verdict>("\"edited\"").unwrap(), Verdict::Edited);
    }

    #[test]
    fn publish_skips_unchanged_content() {
        let dir = tempfile::tempdir().unwrap();
        let mut q = ReviewQueue::open(&dir.path().join("q.jsonl")).unwrap();
        let mut reg = ClipRegistry::default();
        for i in 0..4 {
            let mut r = record(&clip(i), ClipStatus::Annotated);
            r.action_category = ActionCategory::Translation;
            q.enqueue(&r, draft("The drone moves forward.")).unwrap();
            reg.upsert(r);
        }
        auto_accept(&mut q, "auto").unwrap();
        assert_eq!(sync_registry(&q, &mut reg), 4);
        assert!(reg.iter().all(|r| r.status == ClipStatus::Reviewed));
        let store = ManifestStore::new(dir.path().join("m"));
        let m1 = publish_manifest(&q, &reg, &store, 0.75, 0).unwrap().unwrap();
        assert_eq!((m1.count(SplitTag::Train), m1.count(SplitTag::Test)), (3, 1));
        let m2 = publish_manifest(&q, &reg, &store, 0.75, 0).unwrap().unwrap();
        assert_eq!(m1.version, m2.version);
        assert_eq!(store.versions().unwrap().len(), 1);
    }
}
