//! Self-play rejection sampling: expand intentions for a sampled observation,
//! roll out every variant with several seeds, keep the rollout the critic rates
//! best against the basic intention, and fine-tune on the kept pairs once enough
//! have accumulated.
//!
//! State directory layout:
//!
//! ```text
//! <state>/config.json                 snapshot of the config used
//! <state>/state.json                  iteration counter and active model id
//! <state>/iter-NNN/scores.jsonl       one score table per observation attempt
//! <state>/iter-NNN/dispatch.json      frozen synthetic manifest and train job
//! <state>/iter-NNN/report.json        iteration report
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::backends::{
    checked_generate, BackendError, Backends, CriticScore, ExpandReply, ExpandRequest, GenerateRequest,
    Hyperparams, ScoreRequest, ScoreWeights, TrainJobSpec, TrainStatus,
};
use crate::domain::{ActionCategory, ClipId, FrameTensor, VideoClip};
use crate::eventlog::{read_events, write_atomic, EventLog, EventLogError};
use crate::hashing::StableHasher;
use crate::manifest::{DatasetManifest, ManifestEntry, ManifestError, ManifestStore, SplitTag};
use crate::store::{ClipSource, ClipStore, StoreError};
use crate::templates::{self, TemplateSet};

#[derive(Debug, Error)]
pub enum SelfPlayError {
    #[error("invalid self-play config: {0}")]
    Config(String),
    #[error("manifest has no train entries")]
    EmptyTrainSplit,
    #[error("expansion rejected twice: {0}")]
    ExpansionFormat(String),
    #[error("every rollout failed; first error: {0}")]
    AllRolloutsFailed(String),
    #[error("candidate (j={j}, k={k}) has no score")]
    Unscored { j: usize, k: usize },
    #[error("critic returned {got} scores for {expected} videos")]
    ScoreCount { expected: usize, got: usize },
    #[error("only {accepted} of {needed} pairs after {attempts} observation attempts")]
    BudgetExhausted {
        attempts: usize,
        accepted: usize,
        needed: usize,
    },
    #[error("training job {job_id} failed: {reason}")]
    TrainFailed { job_id: String, reason: String },
    #[error("training job {0} did not finish in time")]
    TrainTimeout(String),
    #[error("state directory: {0}")]
    State(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<EventLogError> for SelfPlayError {
    fn from(e: EventLogError) -> Self {
        Self::State(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfPlayConfig {
    /// Extended intentions per observation.
    pub m: usize,
    /// Rollouts per intention variant.
    pub k: usize,
    pub synthetic_threshold: usize,
    /// Best total below this skips the observation. 0 keeps pure argmax.
    pub min_total_score: f64,
    pub max_iterations: u32,
    pub seed: u64,
    pub num_frames: u32,
    pub height: u32,
    pub width: u32,
    pub weights: ScoreWeights,
    /// Observation attempts per iteration are capped at this multiple of the threshold.
    pub attempt_budget_factor: usize,
    /// Concurrent generate calls within one observation.
    pub rollout_workers: usize,
    /// Original train pairs added to the fine-tuning set, as a fraction of the threshold.
    pub original_mix_ratio: f64,
    pub epochs: u32,
    pub batch_size: u32,
    pub grad_accum_steps: u32,
    pub train_poll_interval_ms: u64,
    pub train_timeout_secs: u64,
}

impl Default for SelfPlayConfig {
    fn default() -> Self {
        let h = Hyperparams::default();
        Self {
            m: 3,
            k: 4,
            synthetic_threshold: 256,
            min_total_score: 0.0,
            max_iterations: 1,
            seed: 0,
            num_frames: h.resolution[0],
            height: h.resolution[1],
            width: h.resolution[2],
            weights: ScoreWeights::default(),
            attempt_budget_factor: 20,
            rollout_workers: 4,
            original_mix_ratio: 0.0,
            epochs: h.epochs,
            batch_size: h.batch_size,
            grad_accum_steps: h.grad_accum_steps,
            train_poll_interval_ms: 5_000,
            train_timeout_secs: 7 * 24 * 3600,
        }
    }
}

impl SelfPlayConfig {
    pub fn validate(&self) -> Result<(), SelfPlayError> {
        let bad = |m: &str| Err(SelfPlayError::Config(m.to_owned()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.synthetic_threshold == 0 {
            return bad("synthetic_threshold must be at least 1");
        }
        if self.attempt_budget_factor == 0 {
            return bad("attempt_budget_factor must be at least 1");
        }
        let max = self.weights.max_total();
        if !(0.0..=max).contains(&self.min_total_score) {
            return bad(&format!("min_total_score must lie in [0, {max}]"));
        }
        if !(0.0..=1e6).contains(&self.original_mix_ratio) {
            return bad("original_mix_ratio must be non-negative");
        }
        self.hyperparams()
            .validate()
            .map_err(|e| SelfPlayError::Config(e.to_string()))
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_accum_steps: self.grad_accum_steps,
            resolution: [self.num_frames, self.height, self.width],
        }
    }

    pub fn attempt_budget(&self) -> usize {
        self.attempt_budget_factor * self.synthetic_threshold
    }
}

/// A frame of a training clip used as the conditioning observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservationRef {
    pub clip_id: ClipId,
    pub frame_index: usize,
}

impl ObservationRef {
    pub fn key(&self) -> String {
        format!("{}#{}", self.clip_id, self.frame_index)
    }
}

/// Uniform over train entries, then uniform over that clip's frames.
pub fn sample_observation(
    manifest: &DatasetManifest,
    clips: &dyn ClipSource,
    seed: u64,
) -> Result<(ObservationRef, FrameTensor), SelfPlayError> {
    let train: Vec<&ManifestEntry> = manifest.with_split(SplitTag::Train).collect();
    if train.is_empty() {
        return Err(SelfPlayError::EmptyTrainSplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entry = train[rng.random_range(0..train.len())];
    let clip = clips.load(&entry.clip_id)?;
    let frame_index = rng.random_range(0..clip.len());
    Ok((
        ObservationRef {
            clip_id: entry.clip_id.clone(),
            frame_index,
        },
        clip.frames()[frame_index].clone(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionVariantSet {
    pub observation_ref: ObservationRef,
    /// `p_0`, "subject + intention".
    pub basic: String,
    /// `p_1..p_M`, each "subject + intention + description + potential outcomes".
    pub extensions: Vec<String>,
}

impl IntentionVariantSet {
    /// Variant `j`, with 0 the basic intention.
    pub fn variant(&self, j: usize) -> &str {
        if j == 0 {
            &self.basic
        } else {
            &self.extensions[j - 1]
        }
    }

    pub fn len(&self) -> usize {
        1 + self.extensions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn sentence(s: &str) -> String {
    let s = s.trim();
    if s.ends_with(['.', '!', '?']) {
        s.to_owned()
    } else {
        format!("{s}.")
    }
}

fn bare(s: &str) -> String {
    s.trim().trim_end_matches('.').trim().to_lowercase()
}

/// Checks an expansion reply against the two formats and renders the texts.
pub fn validate_expansion(reply: &ExpandReply, m: usize, observation_ref: ObservationRef) -> Result<IntentionVariantSet, String> {
    let basic = &reply.basic;
    if basic.subject.trim().is_empty() || basic.intention.trim().is_empty() {
        return Err("basic intention needs a subject and an intention".into());
    }
    if reply.extensions.len() != m {
        return Err(format!("expected {m} extensions, got {}", reply.extensions.len()));
    }
    let core = bare(&basic.intention);
    let mut extensions = Vec::with_capacity(m);
    for (i, e) in reply.extensions.iter().enumerate() {
        for (name, v) in [
            ("subject", &e.subject),
            ("intention", &e.intention),
            ("intention_description", &e.intention_description),
            ("potential_outcomes", &e.potential_outcomes),
        ] {
            if v.trim().is_empty() {
                return Err(format!("extension {} has an empty {name}", i + 1));
            }
        }
        if !bare(&e.intention).contains(&core) {
            return Err(format!("extension {} changes the intention to {:?}", i + 1, e.intention));
        }
        extensions.push(format!(
            "{} {} {} {}",
            e.subject.trim(),
            sentence(&e.intention),
            sentence(&e.intention_description),
            sentence(&e.potential_outcomes)
        ));
    }
    Ok(IntentionVariantSet {
        observation_ref,
        basic: sentence(&format!("{} {}", basic.subject.trim(), basic.intention.trim())),
        extensions,
    })
}

/// One basic intention plus `m` rephrasings of it. A reply that breaks the
/// format is requested once more before failing.
pub fn expand_intentions(
    observation: &FrameTensor,
    observation_ref: &ObservationRef,
    backends: &Backends,
    templates: &TemplateSet,
    m: usize,
) -> Result<IntentionVariantSet, SelfPlayError> {
    let request = ExpandRequest {
        m,
        template_id: templates::EXPAND.to_owned(),
        prompt: templates.render(templates::EXPAND, &[("m", &m.to_string())]),
    };
    let mut last = String::new();
    for attempt in 0..2 {
        let reply = backends.critic.expand(observation, &request)?;
        match validate_expansion(&reply, m, observation_ref.clone()) {
            Ok(v) => return Ok(v),
            Err(e) => {
                warn!(attempt, error = %e, "expansion rejected");
                last = e;
            }
        }
    }
    Err(SelfPlayError::ExpansionFormat(last))
}

pub fn rollout_seed(run_seed: u64, obs: &ObservationRef, j: usize, k: usize) -> u64 {
    StableHasher::new("selfplay.rollout")
        .u64(run_seed)
        .str(obs.clip_id.as_str())
        .u64(obs.frame_index as u64)
        .u64(j as u64)
        .u64(k as u64)
        .finish_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutCandidate {
    pub j: usize,
    /// 1-based seed index.
    pub k: usize,
    pub seed: u64,
    pub video_ref: ClipId,
    pub score: Option<CriticScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutFailure {
    pub j: usize,
    pub k: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub candidates: Vec<RolloutCandidate>,
    /// Generated clips, parallel to `candidates`.
    pub videos: Vec<VideoClip>,
    pub failures: Vec<RolloutFailure>,
}

/// Generates `k` rollouts for every variant. Failed generations are recorded
/// and skipped; the batch fails only when nothing was generated.
pub fn rollout_batch(
    variants: &IntentionVariantSet,
    observation: &FrameTensor,
    backends: &Backends,
    config: &SelfPlayConfig,
    model_id: Option<&str>,
) -> Result<RolloutBatch, SelfPlayError> {
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|j| (1..=config.k).map(move |k| (j, k)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.rollout_workers.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<(usize, usize, u64, Result<VideoClip, BackendError>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(j, k)| {
                let seed = rollout_seed(config.seed, &variants.observation_ref, j, k);
                let request = GenerateRequest {
                    observation: observation.clone(),
                    prompt: variants.variant(j).to_owned(),
                    seed,
                    num_frames: config.num_frames,
                    height: config.height,
                    width: config.width,
                    model_id: model_id.map(str::to_owned),
                };
                (j, k, seed, checked_generate(backends.generator.as_ref(), &request))
            })
            .collect()
    });
    let mut batch = RolloutBatch {
        candidates: Vec::new(),
        videos: Vec::new(),
        failures: Vec::new(),
    };
    for (j, k, seed, r) in results {
        match r {
            Ok(video) => {
                batch.candidates.push(RolloutCandidate {
                    j,
                    k,
                    seed,
                    video_ref: video.content_id(),
                    score: None,
                });
                batch.videos.push(video);
            }
            Err(e) => {
                warn!(j, k, error = %e, "rollout failed");
                batch.failures.push(RolloutFailure {
                    j,
                    k,
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    if batch.candidates.is_empty() {
        let first = batch.failures.first().map(|f| f.error.clone()).unwrap_or_default();
        return Err(SelfPlayError::AllRolloutsFailed(first));
    }
    Ok(batch)
}

/// Scores every candidate against the basic intention in one comparative call.
pub fn score_batch(
    batch: &mut RolloutBatch,
    basic_intention: &str,
    peer_group_id: &str,
    backends: &Backends,
    templates: &TemplateSet,
    weights: &ScoreWeights,
) -> Result<(), SelfPlayError> {
    let request = ScoreRequest {
        basic_intention: basic_intention.to_owned(),
        rubric_id: templates::RUBRIC.to_owned(),
        prompt: templates.render(
            templates::RUBRIC,
            &[("count", &batch.videos.len().to_string()), ("intention", basic_intention)],
        ),
        peer_group_id: Some(peer_group_id.to_owned()),
    };
    let videos: Vec<&VideoClip> = batch.videos.iter().collect();
    let scores = backends.critic.score(&videos, &request)?;
    if scores.len() != videos.len() {
        return Err(SelfPlayError::ScoreCount {
            expected: videos.len(),
            got: scores.len(),
        });
    }
    for (c, s) in batch.candidates.iter_mut().zip(scores) {
        c.score = Some(CriticScore::from_rubric(s, weights)?);
    }
    Ok(())
}

/// Index of the highest total; ties go to higher intention alignment, then
/// lower `j`, then lower `k`. `None` when the best total is below `min_total`.
pub fn select_best(candidates: &[RolloutCandidate], min_total: f64) -> Result<Option<usize>, SelfPlayError> {
    let mut best: Option<(usize, &CriticScore)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = c.score.as_ref().ok_or(SelfPlayError::Unscored { j: c.j, k: c.k })?;
        let better = match best {
            None => true,
            Some((b, bs)) => {
                let bc = &candidates[b];
                s.total
                    .total_cmp(&bs.total)
                    .then(s.intention_alignment.cmp(&bs.intention_alignment))
                    .then(bc.j.cmp(&c.j))
                    .then(bc.k.cmp(&c.k))
                    .is_gt()
            }
        };
        if better {
            best = Some((i, s));
        }
    }
    Ok(best.filter(|(_, s)| s.total >= min_total).map(|(i, _)| i))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Accepted,
    BelowFloor,
    DuplicateWinner,
    ExpansionFailed,
    RolloutsFailed,
    ScoringFailed,
}

/// Everything decided for one observation attempt. Contains no timestamps, so
/// replays compare equal byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub iteration: u32,
    pub attempt: usize,
    pub model_id: String,
    pub observation_ref: Option<ObservationRef>,
    pub basic_intention: Option<String>,
    pub extensions: Vec<String>,
    pub candidates: Vec<RolloutCandidate>,
    pub failures: Vec<RolloutFailure>,
    pub outcome: AttemptOutcome,
    /// Index into `candidates` of the kept rollout.
    pub winner: Option<usize>,
    pub error: Option<String>,
    pub digest: String,
}

impl ScoreTable {
    pub fn compute_digest(&self) -> String {
        let rows = serde_json::to_string(&self.candidates).expect("serialisable");
        StableHasher::new("selfplay.score-table")
            .u64(u64::from(self.iteration))
            .u64(self.attempt as u64)
            .str(&rows)
            .finish_hex()
    }

    pub fn pair(&self) -> Option<SyntheticPair> {
        let w = &self.candidates[self.winner?];
        (self.outcome == AttemptOutcome::Accepted).then(|| SyntheticPair {
            video_ref: w.video_ref.clone(),
            basic_intention: self.basic_intention.clone().unwrap_or_default(),
            iteration: self.iteration,
            observation_ref: self.observation_ref.clone().expect("accepted attempts have an observation"),
            winner: (w.j, w.k),
            table_digest: self.digest.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub video_ref: ClipId,
    pub basic_intention: String,
    pub iteration: u32,
    pub observation_ref: ObservationRef,
    pub winner: (usize, usize),
    pub table_digest: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        Self {
            count: v.len(),
            min: v.iter().copied().reduce(f64::min),
            max: v.iter().copied().reduce(f64::max),
            mean: Some(v.iter().sum::<f64>() / v.len() as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub status: IterationStatus,
    pub observations_tried: usize,
    pub accepted: usize,
    pub skipped_below_floor: usize,
    pub skipped_duplicate: usize,
    pub skipped_failed: usize,
    pub candidate_totals: Summary,
    pub winner_totals: Summary,
    pub synthetic_manifest_version: Option<u64>,
    pub job_id: Option<String>,
    pub job_outcome: Option<TrainStatus>,
    pub model_before: String,
    pub model_after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dispatch {
    manifest_version: u64,
    job_id: Option<String>,
}

/// Persisted loop position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    /// Completed fine-tuning rounds.
    pub iteration: u32,
    pub active_model_id: String,
    pub train_manifest_version: u64,
}

pub struct SelfPlay<'a> {
    pub config: &'a SelfPlayConfig,
    pub backends: &'a Backends,
    pub clips: &'a ClipStore,
    pub manifests: &'a ManifestStore,
    pub templates: &'a TemplateSet,
    pub state_dir: PathBuf,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>, SelfPlayError> {
    match fs::read(path) {
        Ok(b) => serde_json::from_slice(&b)
            .map(Some)
            .map_err(|e| SelfPlayError::State(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SelfPlayError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serialisable");
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

impl SelfPlay<'_> {
    pub fn iteration_dir(&self, iteration: u32) -> PathBuf {
        self.state_dir.join(format!("iter-{iteration:03}"))
    }

    pub fn scores_path(&self, iteration: u32) -> PathBuf {
        self.iteration_dir(iteration).join("scores.jsonl")
    }

    fn state_path(&self) -> PathBuf {
        self.state_dir.join("state.json")
    }

    /// Loads the loop state, or starts one on `train` with the generator's model.
    pub fn load_state(&self, train: &DatasetManifest) -> Result<LoopState, SelfPlayError> {
        if let Some(s) = read_json::<LoopState>(&self.state_path())? {
            return Ok(s);
        }
        fs::create_dir_all(&self.state_dir)?;
        let model = self.backends.generator.capabilities()?.model_id;
        let s = LoopState {
            iteration: 0,
            active_model_id: model,
            train_manifest_version: train.version,
        };
        write_json(&self.state_path(), &s)?;
        Ok(s)
    }

    fn attempt_seed(&self, iteration: u32, attempt: usize) -> u64 {
        StableHasher::new("selfplay.observation")
            .u64(self.config.seed)
            .u64(u64::from(iteration))
            .u64(attempt as u64)
            .finish_u64()
    }

    /// Runs one observation attempt. Definitive backend failures become skipped
    /// attempts; timeouts and connection errors abort the iteration.
    fn attempt(&self, state: &LoopState, train: &DatasetManifest, attempt: usize, taken: &[ClipId]) -> Result<ScoreTable, SelfPlayError> {
        let cfg = self.config;
        let mut table = ScoreTable {
            iteration: state.iteration,
            attempt,
            model_id: state.active_model_id.clone(),
            observation_ref: None,
            basic_intention: None,
            extensions: Vec::new(),
            candidates: Vec::new(),
            failures: Vec::new(),
            outcome: AttemptOutcome::ExpansionFailed,
            winner: None,
            error: None,
            digest: String::new(),
        };
        let fatal = |e: &SelfPlayError| matches!(e, SelfPlayError::Backend(b) if b.is_retryable());
        let (obs_ref, obs) = sample_observation(train, self.clips, self.attempt_seed(state.iteration, attempt))?;
        table.observation_ref = Some(obs_ref.clone());
        let variants = match expand_intentions(&obs, &obs_ref, self.backends, self.templates, cfg.m) {
            Ok(v) => v,
            Err(e) if fatal(&e) => return Err(e),
            Err(e) => {
                table.error = Some(e.to_string());
                return Ok(self.seal(table));
            }
        };
        table.basic_intention = Some(variants.basic.clone());
        table.extensions = variants.extensions.clone();
        let mut batch = match rollout_batch(&variants, &obs, self.backends, cfg, Some(&state.active_model_id)) {
            Ok(b) => b,
            Err(e) => {
                table.outcome = AttemptOutcome::RolloutsFailed;
                table.error = Some(e.to_string());
                return Ok(self.seal(table));
            }
        };
        table.failures = batch.failures.clone();
        table.candidates = batch.candidates.clone();
        let peer = format!("{}-{}-{}", state.iteration, attempt, obs_ref.key());
        match score_batch(&mut batch, &variants.basic, &peer, self.backends, self.templates, &cfg.weights) {
            Ok(()) => {}
            Err(e) if fatal(&e) => return Err(e),
            Err(e) => {
                table.outcome = AttemptOutcome::ScoringFailed;
                table.error = Some(e.to_string());
                return Ok(self.seal(table));
            }
        }
        table.candidates = batch.candidates.clone();
        let best = select_best(&batch.candidates, cfg.min_total_score)?;
        table.winner = best;
        table.outcome = match best {
            None => AttemptOutcome::BelowFloor,
            Some(i) if taken.contains(&batch.candidates[i].video_ref) => AttemptOutcome::DuplicateWinner,
            Some(i) => {
                self.clips.put(&batch.videos[i])?;
                AttemptOutcome::Accepted
            }
        };
        Ok(self.seal(table))
    }

    fn seal(&self, mut table: ScoreTable) -> ScoreTable {
        table.digest = table.compute_digest();
        table
    }

    /// Score tables already recorded for `iteration`.
    pub fn tables(&self, iteration: u32) -> Result<Vec<ScoreTable>, SelfPlayError> {
        let path = self.scores_path(iteration);
        if !path.exists() {
            return Ok(Vec::new());
        }
        Ok(read_events(&path)?)
    }

    /// Collects pairs until the threshold, resuming from recorded tables.
    fn collect(&self, state: &LoopState, train: &DatasetManifest) -> Result<Vec<ScoreTable>, SelfPlayError> {
        let (mut log, mut tables) = EventLog::<ScoreTable>::open(self.scores_path(state.iteration))?;
        let needed = self.config.synthetic_threshold;
        let budget = self.config.attempt_budget();
        let accepted = |t: &[ScoreTable]| t.iter().filter(|x| x.outcome == AttemptOutcome::Accepted).count();
        if !tables.is_empty() {
            info!(iteration = state.iteration, replayed = tables.len(), "resuming from recorded score tables");
        }
        while accepted(&tables) < needed {
            if tables.len() >= budget {
                return Err(SelfPlayError::BudgetExhausted {
                    attempts: tables.len(),
                    accepted: accepted(&tables),
                    needed,
                });
            }
            let taken: Vec<ClipId> = tables.iter().filter_map(ScoreTable::pair).map(|p| p.video_ref).collect();
            let t = self.attempt(state, train, tables.len(), &taken)?;
            log.append(&t)?;
            tables.push(t);
        }
        Ok(tables)
    }

    fn synthetic_manifest(&self, state: &LoopState, train: &DatasetManifest, pairs: &[SyntheticPair]) -> DatasetManifest {
        let mut entries: Vec<ManifestEntry> = pairs
            .iter()
            .map(|p| ManifestEntry {
                clip_id: p.video_ref.clone(),
                intention: p.basic_intention.clone(),
                split: SplitTag::Synthetic,
                action_category: ActionCategory::classify(&p.basic_intention),
            })
            .collect();
        let extra = (self.config.original_mix_ratio * pairs.len() as f64).round() as usize;
        if extra > 0 {
            use rand::seq::SliceRandom;
            let mut originals: Vec<&ManifestEntry> = train
                .with_split(SplitTag::Train)
                .filter(|e| !entries.iter().any(|x| x.clip_id == e.clip_id))
                .collect();
            originals.shuffle(&mut ChaCha8Rng::seed_from_u64(
                StableHasher::new("selfplay.mix").u64(self.config.seed).u64(u64::from(state.iteration)).finish_u64(),
            ));
            entries.extend(originals.into_iter().take(extra).cloned());
        }
        DatasetManifest {
            version: train.version + 1,
            parent_version: Some(train.version),
            entries,
        }
    }

    fn await_job(&self, job_id: &str) -> Result<TrainStatus, SelfPlayError> {
        let started = Instant::now();
        let timeout = Duration::from_secs(self.config.train_timeout_secs);
        loop {
            let status = self.backends.trainer.poll(job_id)?;
            if status.is_finished() {
                return Ok(status);
            }
            if started.elapsed() >= timeout {
                return Err(SelfPlayError::TrainTimeout(job_id.to_owned()));
            }
            std::thread::sleep(Duration::from_millis(self.config.train_poll_interval_ms));
        }
    }

    /// Sample, expand, roll out, select and accumulate until the threshold,
    /// then freeze the synthetic set, fine-tune on it and advance the model.
    /// The counter moves only when training succeeds; a failed job leaves the
    /// frozen manifest in place for the next attempt.
    pub fn run_iteration(&self, state: &mut LoopState, train: &DatasetManifest) -> Result<IterationReport, SelfPlayError> {
        self.config.validate()?;
        if train.count(SplitTag::Train) == 0 {
            return Err(SelfPlayError::EmptyTrainSplit);
        }
        let dir = self.iteration_dir(state.iteration);
        fs::create_dir_all(&dir)?;
        write_json(&self.state_dir.join("config.json"), self.config)?;
        let tables = self.collect(state, train)?;
        let pairs: Vec<SyntheticPair> = tables.iter().filter_map(ScoreTable::pair).collect();

        let dispatch_path = dir.join("dispatch.json");
        let mut dispatch = match read_json::<Dispatch>(&dispatch_path)? {
            Some(d) if self.manifests.exists(d.manifest_version) => d,
            _ => {
                let draft = self.synthetic_manifest(state, train, &pairs);
                let m = self.manifests.commit(&draft)?;
                let d = Dispatch {
                    manifest_version: m.version,
                    job_id: None,
                };
                write_json(&dispatch_path, &d)?;
                d
            }
        };
        let spec = TrainJobSpec {
            manifest_ref: dispatch.manifest_version,
            base_model_id: state.active_model_id.clone(),
            hyperparams: self.config.hyperparams(),
            job_id: None,
        };
        let outcome = {
            let resumed = match &dispatch.job_id {
                Some(id) => match self.await_job(id) {
                    Err(SelfPlayError::Backend(BackendError::UnknownJob(_))) => None,
                    other => Some(other?),
                },
                None => None,
            };
            match resumed {
                Some(s) => s,
                None => {
                    let id = self.backends.trainer.dispatch(&spec)?;
                    dispatch.job_id = Some(id.clone());
                    write_json(&dispatch_path, &dispatch)?;
                    self.await_job(&id)?
                }
            }
        };
        let job_id = dispatch.job_id.clone().expect("set above");

        let candidate_totals = Summary::of(
            tables
                .iter()
                .flat_map(|t| &t.candidates)
                .filter_map(|c| c.score.as_ref().map(|s| s.total)),
        );
        let winner_totals = Summary::of(
            tables
                .iter()
                .filter(|t| t.outcome == AttemptOutcome::Accepted)
                .filter_map(|t| t.candidates[t.winner?].score.as_ref().map(|s| s.total)),
        );
        let count = |o: AttemptOutcome| tables.iter().filter(|t| t.outcome == o).count();
        let model_before = state.active_model_id.clone();
        let mut report = IterationReport {
            iteration: state.iteration,
            status: IterationStatus::Failed,
            observations_tried: tables.len(),
            accepted: pairs.len(),
            skipped_below_floor: count(AttemptOutcome::BelowFloor),
            skipped_duplicate: count(AttemptOutcome::DuplicateWinner),
            skipped_failed: count(AttemptOutcome::ExpansionFailed)
                + count(AttemptOutcome::RolloutsFailed)
                + count(AttemptOutcome::ScoringFailed),
            candidate_totals,
            winner_totals,
            synthetic_manifest_version: Some(dispatch.manifest_version),
            job_id: Some(job_id.clone()),
            job_outcome: Some(outcome.clone()),
            model_before: model_before.clone(),
            model_after: model_before,
        };
        match outcome {
            TrainStatus::Done { model_id, final_loss } => {
                info!(iteration = state.iteration, %model_id, final_loss, "fine-tuning finished");
                report.status = IterationStatus::Completed;
                report.model_after = model_id.clone();
                write_json(&dir.join("report.json"), &report)?;
                state.active_model_id = model_id;
                state.iteration += 1;
                write_json(&self.state_path(), state)?;
                Ok(report)
            }
            TrainStatus::Failed { reason } => {
                write_json(&dir.join("report.json"), &report)?;
                // A later run re-dispatches the same frozen manifest.
                dispatch.job_id = None;
                write_json(&dispatch_path, &dispatch)?;
                Err(SelfPlayError::TrainFailed { job_id, reason })
            }
            TrainStatus::Queued | TrainStatus::Running => unreachable!("await_job returns finished states"),
        }
    }

    /// Runs iterations until `iterations` more have completed.
    pub fn run(&self, train: &DatasetManifest, iterations: u32) -> Result<Vec<IterationReport>, SelfPlayError> {
        let mut state = self.load_state(train)?;
        let mut reports = Vec::new();
        for _ in 0..iterations {
            reports.push(self.run_iteration(&mut state, train)?);
        }
        Ok(reports)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub attempt: usize,
    pub problem: String,
}

/// Re-checks an iteration offline: every synthetic entry is the replayed
/// argmax of a recorded score table, digests match, and the manifest holds
/// exactly the threshold count of synthetic pairs.
pub fn audit_iteration(
    tables: &[ScoreTable],
    manifest: &DatasetManifest,
    config: &SelfPlayConfig,
) -> Vec<AuditFinding> {
    let mut findings = Vec::new();
    let mut problem = |attempt: usize, p: String| findings.push(AuditFinding { attempt, problem: p });
    for t in tables {
        if t.compute_digest() != t.digest {
            problem(t.attempt, "table digest does not match its rows".into());
        }
        if t.outcome == AttemptOutcome::Accepted {
            match select_best(&t.candidates, config.min_total_score) {
                Ok(w) if w == t.winner => {}
                Ok(w) => problem(t.attempt, format!("recorded winner {:?}, replay gives {w:?}", t.winner)),
                Err(e) => problem(t.attempt, e.to_string()),
            }
            if let Some(w) = t.winner {
                let max = t.candidates.iter().filter_map(|c| c.score.as_ref()).map(|s| s.total).fold(f64::MIN, f64::max);
                if t.candidates[w].score.as_ref().map(|s| s.total) != Some(max) {
                    problem(t.attempt, "winner total is not the table maximum".into());
                }
            }
        }
    }
    let winners: Vec<SyntheticPair> = tables.iter().filter_map(ScoreTable::pair).collect();
    let synthetic: Vec<&ManifestEntry> = manifest.with_split(SplitTag::Synthetic).collect();
    if synthetic.len() != config.synthetic_threshold {
        problem(
            usize::MAX,
            format!("{} synthetic entries, threshold is {}", synthetic.len(), config.synthetic_threshold),
        );
    }
    for e in synthetic {
        if !winners.iter().any(|p| p.video_ref == e.clip_id && p.basic_intention == e.intention) {
            problem(usize::MAX, format!("entry {} is not a recorded winner", e.clip_id));
        }
    }
    findings
}
