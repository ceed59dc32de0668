//! Deterministic stand-ins for the four backend roles.
//!
//! Every output is a pure function of the request and the mock's own
//! configuration, so full loops replay bit-exact.
//!
//! - Generator: frame `t` is the observation shifted by `t * (dx, dy)` pixels
//!   with wraparound. A prompt mentioning "forward" moves content up; "rotat…"
//!   with "left" / "right" moves it right / left; both may combine; anything
//!   else yields a static copy. The step size (1 to 3 px) is keyed on the model
//!   id and seed.
//! - Critic: each rubric dimension is one byte of a keyed digest of the video
//!   and intention, mod 11.
//! - Trainer: final loss is the mean per-pixel MSE between each pair's video and
//!   the mock generator's output for that pair's intention.
//! - Embedder: hand-made colour and motion statistics.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::*;
use crate::domain::{ClipId, Fps};
use crate::hashing::StableHasher;
use crate::imaging;
use crate::manifest::ManifestStore;
use crate::store::ClipSource;
use crate::synth::translate_wrapping;

pub const BASE_MODEL_ID: &str = "mock-wm-base";

/// Unit pan direction the mock generator reads from a prompt.
pub fn prompt_motion(prompt: &str) -> (i64, i64) {
    let p = prompt.to_lowercase();
    let dy = if p.contains("forward") { -1 } else { 0 };
    let dx = if p.contains("rotat") {
        match (p.contains("left"), p.contains("right")) {
            (true, false) => 1,
            (false, true) => -1,
            _ => 0,
        }
    } else {
        0
    };
    (dx, dy)
}

pub fn mock_step(model_id: &str, seed: u64) -> i64 {
    let d = StableHasher::new("mock.generator.step").str(model_id).u64(seed).digest();
    1 + i64::from(d[0] % 3)
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    pub model_id: String,
}

impl Default for MockGenerator {
    fn default() -> Self {
        Self {
            model_id: BASE_MODEL_ID.to_owned(),
        }
    }
}

impl MockGenerator {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
        }
    }

    pub fn render(&self, request: &GenerateRequest) -> BackendResult<VideoClip> {
        request.validate()?;
        let model = request.model_id.as_deref().unwrap_or(&self.model_id);
        let step = mock_step(model, request.seed);
        let (ux, uy) = prompt_motion(&request.prompt);
        let obs = imaging::resize_bilinear(&request.observation, request.height, request.width);
        let frames = (0..i64::from(request.num_frames))
            .map(|t| translate_wrapping(&obs, t * step * ux, t * step * uy))
            .collect();
        Ok(VideoClip::new(frames, Fps::default())?)
    }
}

impl Generator for MockGenerator {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        Ok(Capabilities {
            role: Role::Generator,
            max_shape: None,
            embed_dim: None,
            video_frames: None,
            deterministic: true,
            model_id: self.model_id.clone(),
        })
    }

    fn generate(&self, request: &GenerateRequest) -> BackendResult<VideoClip> {
        self.render(request)
    }
}

const ACTIONS: &[&str] = &[
    "move forward",
    "rotate left",
    "rotate right",
    "move forward while rotating left",
    "move forward while rotating right",
    "ascend",
    "descend",
];

const STOPS: &[&str] = &[
    "until near the blue building",
    "until near the tree line",
    "until near the bridge",
    "until the river fills the view",
    "until near the red roof",
    "until the road is centred",
];

const INTENTIONS: &[&str] = &[
    "moves forward",
    "rotates left",
    "rotates right",
    "moves forward while rotating left",
    "moves forward while rotating right",
];

const TARGETS: &[&str] = &[
    "toward the water tower",
    "along the river bank",
    "over the parking lot",
    "past the tall chimney",
    "toward the stadium",
];

const DESCRIPTIONS: &[&str] = &[
    "keeping a steady altitude and speed",
    "with a smooth and even motion",
    "without changing the gimbal pitch",
    "at a slow, constant pace",
];

const OUTCOMES: &[&str] = &[
    "The target grows larger in the frame.",
    "New buildings enter the view from the edge.",
    "The horizon stays level while the scene slides past.",
    "Nearby objects pass beneath the camera.",
];

/// Third-person singular of the first word of an imperative phrase.
pub fn third_person(phrase: &str) -> String {
    let (verb, rest) = phrase.split_once(' ').unwrap_or((phrase, ""));
    let conj = if ["s", "sh", "ch", "x", "z", "o"].iter().any(|s| verb.ends_with(s)) {
        format!("{verb}es")
    } else if verb.ends_with('y') && !verb.ends_with("ay") && !verb.ends_with("ey") && !verb.ends_with("oy") {
        format!("{}ies", &verb[..verb.len() - 1])
    } else {
        format!("{verb}s")
    };
    if rest.is_empty() {
        conj
    } else {
        format!("{conj} {rest}")
    }
}

/// The mock critic's merge rule for the last chain-of-thought step.
pub fn merge_rule(action: &str, stop_condition: &str) -> String {
    let stop = stop_condition.trim().trim_end_matches('.');
    let stop = match stop.strip_prefix("until near ") {
        Some(rest) => format!("until it approaches {rest}"),
        None => stop.to_owned(),
    };
    let action = action.trim();
    let lower = action.to_lowercase();
    let head = if lower.starts_with("the drone ") {
        action.to_owned()
    } else {
        format!("The drone {}", third_person(&lower))
    };
    if stop.is_empty() {
        format!("{head}.")
    } else {
        format!("{head} {stop}.")
    }
}

fn pick<'a>(list: &[&'a str], byte: u8) -> &'a str {
    list[usize::from(byte) % list.len()]
}

#[derive(Debug, Clone)]
pub struct MockCritic {
    pub seed: u64,
    pub model_id: String,
    /// Fixed `(action, stop_condition)` answers for the drafting steps.
    pub canned_draft: Option<(String, String)>,
    pub canned_expansion: Option<ExpandReply>,
}

impl Default for MockCritic {
    fn default() -> Self {
        Self::new(0)
    }
}

impl MockCritic {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            model_id: "mock-critic".to_owned(),
            canned_draft: None,
            canned_expansion: None,
        }
    }

    pub fn with_canned_draft(mut self, action: &str, stop_condition: &str) -> Self {
        self.canned_draft = Some((action.to_owned(), stop_condition.to_owned()));
        self
    }

    pub fn score_one(&self, video: &VideoClip, intention: &str) -> RubricScores {
        let video_digest = video.content_id();
        let intention_digest: [u8; 32] = Sha256::digest(intention.as_bytes()).into();
        let d = StableHasher::new("mock.critic.score")
            .u64(self.seed)
            .str(video_digest.as_str())
            .bytes(&intention_digest)
            .digest();
        RubricScores {
            intention_alignment: d[0] % 11,
            spatial_consistency: d[1] % 11,
            temporal_continuity: d[2] % 11,
            projective_geometry: d[3] % 11,
            rationale_text: format!("mock rating {}", &hex::encode(&d[..4])),
        }
    }

    fn clip_key(&self, what: &str, id: &ClipId) -> [u8; 32] {
        StableHasher::new("mock.critic.draft").u64(self.seed).str(what).str(id.as_str()).digest()
    }
}

impl Critic for MockCritic {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        Ok(Capabilities {
            role: Role::Critic,
            max_shape: None,
            embed_dim: None,
            video_frames: None,
            deterministic: true,
            model_id: self.model_id.clone(),
        })
    }

    fn score(&self, videos: &[&VideoClip], request: &ScoreRequest) -> BackendResult<Vec<RubricScores>> {
        if videos.is_empty() {
            return Err(BackendError::InvalidRequest("no videos to score".into()));
        }
        Ok(videos.iter().map(|v| self.score_one(v, &request.basic_intention)).collect())
    }

    fn draft(&self, clip: &VideoClip, request: &DraftRequest) -> BackendResult<DraftReply> {
        let text = match request.step {
            CotStep::Action => match &self.canned_draft {
                Some((a, _)) => a.clone(),
                None => pick(ACTIONS, self.clip_key("action", &clip.content_id())[0]).to_owned(),
            },
            CotStep::StopCondition => match &self.canned_draft {
                Some((_, s)) => s.clone(),
                None => pick(STOPS, self.clip_key("stop", &clip.content_id())[0]).to_owned(),
            },
            CotStep::Merge => {
                let (Some(a), Some(s)) = (&request.action, &request.stop_condition) else {
                    return Err(BackendError::InvalidRequest("merge needs action and stop_condition".into()));
                };
                merge_rule(a, s)
            }
        };
        Ok(DraftReply {
            text,
            model_id: self.model_id.clone(),
        })
    }

    fn expand(&self, observation: &FrameTensor, request: &ExpandRequest) -> BackendResult<ExpandReply> {
        if let Some(canned) = &self.canned_expansion {
            return Ok(canned.clone());
        }
        let obs_digest: [u8; 32] = Sha256::digest(observation.data()).into();
        let d = StableHasher::new("mock.critic.expand").u64(self.seed).bytes(&obs_digest).digest();
        let intention = format!("{} {}", pick(INTENTIONS, d[0]), pick(TARGETS, d[1]));
        let subject = "The drone".to_owned();
        let extensions = (0..request.m)
            .map(|j| ExtendedIntention {
                subject: subject.clone(),
                intention: intention.clone(),
                intention_description: pick(DESCRIPTIONS, d[2].wrapping_add(j as u8)).to_owned(),
                potential_outcomes: pick(OUTCOMES, d[3].wrapping_add(j as u8)).to_owned(),
            })
            .collect();
        Ok(ExpandReply {
            basic: BasicIntention { subject, intention },
            extensions,
            model_id: self.model_id.clone(),
        })
    }
}

/// Mean squared difference between two equally shaped clips, in [0, 1].
pub fn clip_mse(a: &VideoClip, b: &VideoClip) -> Option<f64> {
    if (a.len(), a.height(), a.width()) != (b.len(), b.height(), b.width()) {
        return None;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (fa, fb) in a.frames().iter().zip(b.frames()) {
        for (x, y) in fa.data().iter().zip(fb.data()) {
            let d = (f64::from(*x) - f64::from(*y)) / 255.0;
            sum += d * d;
        }
        n += fa.data().len();
    }
    Some(sum / n as f64)
}

struct Job {
    polls: u32,
    outcome: TrainStatus,
}

/// Trainer that reads the manifest from a shared dataset directory and scores
/// it against the mock generator instead of training.
pub struct MockTrainer {
    manifests: ManifestStore,
    clips: Arc<dyn ClipSource>,
    /// Polls answered with queued/running before the outcome is reported.
    pub polls_to_finish: u32,
    /// Forces every job to fail with this reason.
    pub fail_with: Option<String>,
    jobs: Mutex<HashMap<String, Job>>,
}

impl MockTrainer {
    pub fn new(manifests: ManifestStore, clips: Arc<dyn ClipSource>) -> Self {
        Self {
            manifests,
            clips,
            polls_to_finish: 2,
            fail_with: None,
            jobs: Mutex::new(HashMap::new()),
        }
    }

    fn evaluate(&self, spec: &TrainJobSpec, manifest: &crate::manifest::DatasetManifest) -> TrainStatus {
        if let Some(reason) = &self.fail_with {
            return TrainStatus::Failed { reason: reason.clone() };
        }
        if manifest.entries.is_empty() {
            return TrainStatus::Failed {
                reason: "manifest has no entries".into(),
            };
        }
        let reference = MockGenerator::new(spec.base_model_id.clone());
        let mut total = 0.0;
        for entry in &manifest.entries {
            let video = match self.clips.load(&entry.clip_id) {
                Ok(v) => v,
                Err(e) => return TrainStatus::Failed { reason: e.to_string() },
            };
            let request = GenerateRequest {
                observation: video.first_frame().clone(),
                prompt: entry.intention.clone(),
                seed: 0,
                num_frames: video.len() as u32,
                height: video.height(),
                width: video.width(),
                model_id: Some(spec.base_model_id.clone()),
            };
            let predicted = match reference.render(&request) {
                Ok(p) => p,
                Err(e) => return TrainStatus::Failed { reason: e.to_string() },
            };
            total += clip_mse(&video, &predicted).expect("same shape by construction");
        }
        let model_id = format!(
            "mock-wm-{}",
            &StableHasher::new("mock.trainer.model")
                .str(&spec.base_model_id)
                .str(&manifest.content_digest())
                .finish_hex()[..12]
        );
        TrainStatus::Done {
            model_id,
            final_loss: total / manifest.entries.len() as f64,
        }
    }
}

impl Trainer for MockTrainer {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        Ok(Capabilities {
            role: Role::Trainer,
            max_shape: None,
            embed_dim: None,
            video_frames: None,
            deterministic: true,
            model_id: BASE_MODEL_ID.to_owned(),
        })
    }

    fn dispatch(&self, spec: &TrainJobSpec) -> BackendResult<String> {
        spec.hyperparams.validate()?;
        let manifest = self
            .manifests
            .read(spec.manifest_ref)
            .map_err(|_| BackendError::UnknownManifest(spec.manifest_ref))?;
        let job_id = format!(
            "job-{}",
            &StableHasher::new("mock.trainer.job")
                .u64(spec.manifest_ref)
                .str(&spec.base_model_id)
                .str(&serde_json::to_string(&spec.hyperparams).expect("serialisable"))
                .str(&manifest.content_digest())
                .finish_hex()[..16]
        );
        let mut jobs = self.jobs.lock().expect("poisoned");
        if !jobs.contains_key(&job_id) {
            let outcome = self.evaluate(spec, &manifest);
            jobs.insert(job_id.clone(), Job { polls: 0, outcome });
        }
        Ok(job_id)
    }

    fn poll(&self, job_id: &str) -> BackendResult<TrainStatus> {
        let mut jobs = self.jobs.lock().expect("poisoned");
        let job = jobs.get_mut(job_id).ok_or_else(|| BackendError::UnknownJob(job_id.to_owned()))?;
        let n = job.polls;
        job.polls = job.polls.saturating_add(1);
        Ok(if n >= self.polls_to_finish {
            job.outcome.clone()
        } else if n == 0 {
            TrainStatus::Queued
        } else {
            TrainStatus::Running
        })
    }
}

pub const MOCK_EMBED_DIM: usize = 16;

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub video_frames: usize,
    pub model_id: String,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(16)
    }
}

/// Channel means, channel variances and 4-bin luma histogram of one frame,
/// padded with zeros to 16 values. All features are scaled to [0, 1].
pub fn frame_features(frame: &FrameTensor) -> Vec<f64> {
    let n = frame.pixel_count() as f64;
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for px in frame.data().chunks_exact(3) {
        for c in 0..3 {
            let v = f64::from(px[c]) / 255.0;
            sum[c] += v;
            sq[c] += v * v;
        }
    }
    let mut hist = [0.0f64; 4];
    for l in frame.luma() {
        hist[((l / 64.0) as usize).min(3)] += 1.0;
    }
    let mut out = Vec::with_capacity(MOCK_EMBED_DIM);
    out.extend(sum.iter().map(|s| s / n));
    out.extend(sum.iter().zip(&sq).map(|(s, q)| (q / n - (s / n).powi(2)).max(0.0)));
    out.extend(hist.iter().map(|h| h / n));
    out.resize(MOCK_EMBED_DIM, 0.0);
    out
}

impl MockEmbedder {
    pub fn new(video_frames: usize) -> Self {
        Self {
            video_frames,
            model_id: "mock-embedder".to_owned(),
        }
    }

    /// First ten frame features averaged over time, then six motion features:
    /// mean, max and spread of consecutive luma change, first and last frame
    /// mean luma, and the net change between them.
    pub fn video_features(clip: &VideoClip) -> Vec<f64> {
        let per_frame: Vec<Vec<f64>> = clip.frames().iter().map(frame_features).collect();
        let t = per_frame.len() as f64;
        let mut out: Vec<f64> = (0..10).map(|i| per_frame.iter().map(|f| f[i]).sum::<f64>() / t).collect();
        let lumas: Vec<Vec<f64>> = clip.frames().iter().map(|f| f.luma()).collect();
        let mean_luma = |l: &[f64]| l.iter().sum::<f64>() / l.len() as f64 / 255.0;
        let diffs: Vec<f64> = lumas
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).sum::<f64>() / w[0].len() as f64 / 255.0)
            .collect();
        let (mean_d, max_d, sd_d) = if diffs.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / diffs.len() as f64;
            (m, diffs.iter().copied().fold(0.0, f64::max), var.sqrt())
        };
        let first = mean_luma(&lumas[0]);
        let last = mean_luma(lumas.last().expect("non-empty"));
        out.extend([mean_d, max_d, sd_d, first, last, last - first]);
        out
    }
}

impl Embedder for MockEmbedder {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        Ok(Capabilities {
            role: Role::Embedder,
            max_shape: None,
            embed_dim: Some(MOCK_EMBED_DIM),
            video_frames: Some(self.video_frames),
            deterministic: true,
            model_id: self.model_id.clone(),
        })
    }

    fn embed_frames(&self, frames: &[FrameTensor]) -> BackendResult<Vec<Vec<f64>>> {
        Ok(frames.iter().map(frame_features).collect())
    }

    fn embed_video(&self, clip: &VideoClip) -> BackendResult<Vec<f64>> {
        if clip.len() != self.video_frames {
            return Err(BackendError::InvalidRequest(format!(
                "video embedding expects {} frames, got {}",
                self.video_frames,
                clip.len()
            )));
        }
        Ok(Self::video_features(clip))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ActionCategory;
    use crate::manifest::{DatasetManifest, ManifestEntry, SplitTag};
    use crate::store::MemoryClipSource;
    use crate::synth;

    fn request(prompt: &str, seed: u64) -> GenerateRequest {
        GenerateRequest {
            observation: synth::textured_frame(12, 16, 1),
            prompt: prompt.into(),
            seed,
            num_frames: 5,
            height: 12,
            width: 16,
            model_id: None,
        }
    }

    #[test]
    fn keyword_rule() {
        assert_eq!(prompt_motion("The drone moves forward."), (0, -1));
        assert_eq!(prompt_motion("Rotate 90 degrees to the left."), (1, 0));
        assert_eq!(prompt_motion("rotating right"), (-1, 0));
        assert_eq!(prompt_motion("moves forward while rotating left"), (1, -1));
        assert_eq!(prompt_motion("hover in place"), (0, 0));
        assert_eq!(prompt_motion("turn left"), (0, 0));
    }

    #[test]
    fn forward_shifts_content_up() {
        let g = MockGenerator::default();
        let req = request("move forward", 3);
        let clip = g.generate(&req).unwrap();
        let step = mock_step(BASE_MODEL_ID, 3);
        assert!((1..=3).contains(&step));
        let obs = &req.observation;
        for (t, frame) in clip.frames().iter().enumerate() {
            for y in 0..12u32 {
                for x in 0..16u32 {
                    let src_y = (i64::from(y) + t as i64 * step).rem_euclid(12) as u32;
                    assert_eq!(frame.pixel(x, y), obs.pixel(x, src_y));
                }
            }
        }
    }

    #[test]
    fn unknown_verb_is_static_copy() {
        let clip = MockGenerator::default().generate(&request("hover", 0)).unwrap();
        assert!(clip.frames().iter().all(|f| f == clip.first_frame()));
        assert_eq!(clip.first_frame(), &request("hover", 0).observation);
    }

    #[test]
    fn generator_resizes_and_honours_shape() {
        let mut req = request("rotate left", 1);
        req.height = 8;
        req.width = 8;
        req.num_frames = 3;
        let clip = checked_generate(&MockGenerator::default(), &req).unwrap();
        assert_eq!((clip.len(), clip.height(), clip.width()), (3, 8, 8));
    }

    #[test]
    fn generation_is_keyed_on_model_and_seed() {
        let g = MockGenerator::default();
        let a = g.generate(&request("move forward", 0)).unwrap();
        assert_eq!(a, g.generate(&request("move forward", 0)).unwrap());
        let steps: std::collections::HashSet<i64> = (0..32).map(|s| mock_step(BASE_MODEL_ID, s)).collect();
        assert_eq!(steps.len(), 3);
    }

    #[test]
    fn merge_rule_matches_reference_sentence() {
        assert_eq!(
            merge_rule("move forward", "until near the blue building"),
            "The drone moves forward until it approaches the blue building."
        );
        assert_eq!(third_person("approach the gate"), "approaches the gate");
        assert_eq!(third_person("fly"), "flies");
        assert_eq!(merge_rule("rotate left", "until the road is centred."), "The drone rotates left until the road is centred.");
    }

    #[test]
    fn critic_scores_are_deterministic_digest_bytes() {
        let c = MockCritic::new(9);
        let v = synth::moving_gradient(3, 4, 4, 8, 0);
        let req = ScoreRequest {
            basic_intention: "The drone moves forward.".into(),
            rubric_id: "r".into(),
            prompt: String::new(),
            peer_group_id: None,
        };
        let a = c.score(&[&v], &req).unwrap();
        assert_eq!(a, c.score(&[&v], &req).unwrap());
        // Independent recomputation of the keyed digest.
        let mut h = StableHasher::new("mock.critic.score");
        h.u64(9).str(v.content_id().as_str());
        let intention_digest: [u8; 32] = Sha256::digest(req.basic_intention.as_bytes()).into();
        h.bytes(&intention_digest);
        let d = h.digest();
        assert_eq!(a[0].intention_alignment, d[0] % 11);
        assert_eq!(a[0].projective_geometry, d[3] % 11);
    }

    #[test]
    fn expansion_has_m_extensions_sharing_the_verb_phrase() {
        let c = MockCritic::new(1);
        let obs = synth::textured_frame(8, 8, 5);
        let req = |m| ExpandRequest {
            m,
            template_id: "t".into(),
            prompt: String::new(),
        };
        assert!(c.expand(&obs, &req(0)).unwrap().extensions.is_empty());
        let r = c.expand(&obs, &req(3)).unwrap();
        assert_eq!(r.extensions.len(), 3);
        assert!(r.extensions.iter().all(|e| e.intention.contains(&r.basic.intention)));
    }

    #[test]
    fn trainer_loss_is_mean_reconstruction_mse() {
        let clips = Arc::new(MemoryClipSource::new());
        let g = MockGenerator::default();
        let obs = synth::textured_frame(8, 8, 2);
        let mut req = request("move forward", 0);
        req.observation = obs.clone();
        req.height = 8;
        req.width = 8;
        req.num_frames = 4;
        let exact = g.generate(&req).unwrap();
        let off = synth::panning(&obs, 4, 1, 0);
        let exact_id = clips.insert(exact.clone());
        let off_id = clips.insert(off.clone());
        let dir = tempfile::tempdir().unwrap();
        let store = ManifestStore::new(dir.path());
        let entry = |id: &ClipId| ManifestEntry {
            clip_id: id.clone(),
            intention: "move forward".into(),
            split: SplitTag::Synthetic,
            action_category: ActionCategory::Translation,
        };
        let v1 = store.commit(&DatasetManifest::new(1, None, vec![entry(&exact_id)]).unwrap()).unwrap();
        let v2 = store
            .commit(&DatasetManifest::new(2, Some(v1.version), vec![entry(&exact_id), entry(&off_id)]).unwrap())
            .unwrap();
        let mut trainer = MockTrainer::new(store, clips);
        trainer.polls_to_finish = 0;
        let spec = |v| TrainJobSpec {
            manifest_ref: v,
            base_model_id: BASE_MODEL_ID.into(),
            hyperparams: Hyperparams::default(),
            job_id: None,
        };
        let j1 = trainer.dispatch(&spec(v1.version)).unwrap();
        let TrainStatus::Done { final_loss, model_id } = trainer.poll(&j1).unwrap() else {
            panic!()
        };
        assert_eq!(final_loss, 0.0);
        assert_ne!(model_id, BASE_MODEL_ID);

        // Oracle: direct pixel loop over the mismatching pair.
        let predicted = g.generate(&GenerateRequest { observation: off.first_frame().clone(), ..req.clone() }).unwrap();
        let mut sq = 0.0;
        let mut n = 0.0;
        for t in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    let (a, b) = (off.frames()[t].pixel(x, y), predicted.frames()[t].pixel(x, y));
                    for c in 0..3 {
                        sq += ((f64::from(a[c]) - f64::from(b[c])) / 255.0).powi(2);
                        n += 1.0;
                    }
                }
            }
        }
        let j2 = trainer.dispatch(&spec(v2.version)).unwrap();
        let TrainStatus::Done { final_loss, .. } = trainer.poll(&j2).unwrap() else {
            panic!()
        };
        assert!((final_loss - (0.0 + sq / n) / 2.0).abs() < 1e-12);
        assert!(final_loss > 0.0);
    }

    #[test]
    fn trainer_job_lifecycle_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let clips = Arc::new(MemoryClipSource::new());
        let id = clips.insert(synth::moving_gradient(2, 4, 4, 8, 0));
        let store = ManifestStore::new(dir.path());
        let m = store
            .commit(
                &DatasetManifest::new(
                    1,
                    None,
                    vec![ManifestEntry {
                        clip_id: id,
                        intention: "x".into(),
                        split: SplitTag::Synthetic,
                        action_category: ActionCategory::Unknown,
                    }],
                )
                .unwrap(),
            )
            .unwrap();
        let trainer = MockTrainer::new(store, clips);
        let mut spec = TrainJobSpec {
            manifest_ref: m.version,
            base_model_id: BASE_MODEL_ID.into(),
            hyperparams: Hyperparams::default(),
            job_id: None,
        };
        let job = trainer.dispatch(&spec).unwrap();
        assert_eq!(job, trainer.dispatch(&spec).unwrap());
        assert_eq!(trainer.poll(&job).unwrap(), TrainStatus::Queued);
        assert_eq!(trainer.poll(&job).unwrap(), TrainStatus::Running);
        assert!(matches!(trainer.poll(&job).unwrap(), TrainStatus::Done { .. }));
        assert!(matches!(trainer.poll("job-nope"), Err(BackendError::UnknownJob(_))));
        spec.manifest_ref = 99;
        assert!(matches!(trainer.dispatch(&spec), Err(BackendError::UnknownManifest(99))));
        spec.manifest_ref = m.version;
        spec.hyperparams.batch_size = 0;
        assert!(matches!(trainer.dispatch(&spec), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn frame_embedding_layout() {
        let f = FrameTensor::filled(4, 4, [255, 0, 0]).unwrap();
        let e = frame_features(&f);
        assert_eq!(e.len(), 16);
        assert_eq!(&e[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&e[3..6], &[0.0, 0.0, 0.0]);
        // luma of pure red is 76.2, second bin
        assert_eq!(&e[6..10], &[0.0, 1.0, 0.0, 0.0]);
        assert!(e[10..].iter().all(|&v| v == 0.0));
        assert_eq!(e, frame_features(&f.clone()));
    }

    #[test]
    fn video_embedding_checks_frame_count() {
        let emb = MockEmbedder::new(4);
        let clip = synth::moving_gradient(4, 4, 4, 8, 0);
        let v = emb.embed_video(&clip).unwrap();
        assert_eq!(v.len(), 16);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(emb.embed_video(&synth::moving_gradient(5, 4, 4, 8, 0)).is_err());
    }
}
