//! Stage driver: ingest, annotate, self-play and evaluation over one dataset
//! directory. Every stage is safe to re-run; finished work is skipped.

use std::collections::BTreeMap;
use std::path::PathBuf;

use aeroloop_core::annotate::{self, AnnotateSummary, ReviewQueue};
use aeroloop_core::backends::Backends;
use aeroloop_core::eventlog::{read_events, write_atomic, EventLog};
use aeroloop_core::ingest::{self, list_sources, source_video_id, SourceDecoder};
use aeroloop_core::metrics::iar::{assign_raters, default_rater_ids, IarItem, IarStore};
use aeroloop_core::metrics::{evaluate, generate_predictions, EvalPair, EvalReport};
use aeroloop_core::selfplay::{IterationReport, LoopState, SelfPlay};
use aeroloop_core::manifest::ManifestStore;
use aeroloop_core::store::{ClipSource, ClipStore, Dataset};
use aeroloop_core::templates::TemplateSet;
use aeroloop_core::{ClipId, ClipStatus, DatasetManifest, ManifestEntry, SplitTag};
use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::config::PipelineConfig;

/// Reviewer name recorded when drafts are accepted without a human.
pub const AUTO_REVIEWER: &str = "auto";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Annotate,
    Selfplay,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Ingest, Stage::Annotate, Stage::Selfplay, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Annotate => "annotate",
            Stage::Selfplay => "selfplay",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Started,
    Completed,
    Failed,
}

/// One line of `pipeline/status.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub at: DateTime<Utc>,
    pub stage: Stage,
    pub state: StageState,
    #[serde(default)]
    pub detail: serde_json::Value,
}

pub fn status_path(dataset: &Dataset) -> PathBuf {
    dataset.pipeline_dir().join("status.jsonl")
}

/// Latest event per stage, in stage order.
pub fn stage_status(dataset: &Dataset) -> Result<Vec<StageEvent>> {
    let path = status_path(dataset);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut latest = BTreeMap::new();
    for e in read_events::<StageEvent>(&path)? {
        latest.insert(e.stage, e);
    }
    Ok(latest.into_values().collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub sources: usize,
    pub skipped_sources: usize,
    pub failed_sources: Vec<(String, String)>,
    pub windows: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotateOutcome {
    pub summary: AnnotateSummary,
    pub registry_changes: usize,
    pub manifest_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub iar_session_id: String,
    pub report_path: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub auto_accept: bool,
    /// Self-play iterations per run; the config's `max_iterations` when unset.
    pub iterations: Option<u32>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunSummary {
    pub ingest: Option<IngestSummary>,
    pub annotate: Option<AnnotateOutcome>,
    pub selfplay: Option<Vec<IterationReport>>,
    pub eval: Option<EvalOutcome>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub dataset: Dataset,
    pub backends: Backends,
    pub templates: TemplateSet,
    clips: ClipStore,
    manifests: ManifestStore,
}

impl Pipeline {
    pub fn open(config: PipelineConfig) -> Result<Self> {
        let dataset = config.dataset().context("opening dataset directory")?;
        let backends = config.backends(&dataset).context("connecting backends")?;
        let templates = match &config.annotate.templates_dir {
            Some(dir) => TemplateSet::with_overrides(dir).with_context(|| format!("templates in {}", dir.display()))?,
            None => TemplateSet::builtin(),
        };
        Ok(Self {
            clips: dataset.clips(),
            manifests: dataset.manifests(),
            config,
            dataset,
            backends,
            templates,
        })
    }

    fn mark(&self, stage: Stage, state: StageState, detail: serde_json::Value) -> Result<()> {
        let (mut log, _) = EventLog::<StageEvent>::open(status_path(&self.dataset))?;
        log.append(&StageEvent {
            at: Utc::now(),
            stage,
            state,
            detail,
        })?;
        Ok(())
    }

    fn tracked<T: Serialize>(&self, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
        self.mark(stage, StageState::Started, serde_json::Value::Null)?;
        match f() {
            Ok(v) => {
                self.mark(stage, StageState::Completed, serde_json::to_value(&v)?)?;
                Ok(v)
            }
            Err(e) => {
                self.mark(stage, StageState::Failed, serde_json::json!({ "error": format!("{e:#}") }))?;
                Err(e)
            }
        }
    }

    pub fn ingest(&self) -> Result<IngestSummary> {
        self.tracked(Stage::Ingest, || {
            let cfg = &self.config.ingest;
            let mut registry = self.dataset.registry()?;
            let all = list_sources(&cfg.sources_dir).with_context(|| format!("listing {}", cfg.sources_dir.display()))?;
            let (done, todo): (Vec<_>, Vec<_>) = all.into_iter().partition(|p| registry.has_source(&source_video_id(p)));
            let decoder = SourceDecoder {
                external: cfg.external_decoder(),
            };
            let mut s = IngestSummary {
                sources: todo.len(),
                skipped_sources: done.len(),
                ..Default::default()
            };
            for outcome in ingest::ingest_sources(&todo, &decoder, &cfg.ingest_config(), &self.dataset.clips()) {
                match outcome.result {
                    Ok(records) => {
                        s.windows += records.len();
                        s.kept += records.iter().filter(|r| r.status == ClipStatus::Ingested).count();
                        for r in records {
                            registry.upsert(r);
                        }
                    }
                    Err(e) => {
                        warn!(source = %outcome.source.display(), error = %e, "source failed");
                        s.failed_sources.push((outcome.source.display().to_string(), e.to_string()));
                    }
                }
            }
            self.dataset.save_registry(&registry)?;
            info!(sources = s.sources, kept = s.kept, "ingest done");
            Ok(s)
        })
    }

    pub fn open_queue(&self) -> Result<ReviewQueue> {
        Ok(ReviewQueue::open_with_lease(
            &self.dataset.review_log_path(),
            chrono::Duration::minutes(self.config.annotate.lease_minutes),
        )?)
    }

    pub fn annotate(&self, auto_accept: bool) -> Result<AnnotateOutcome> {
        self.tracked(Stage::Annotate, || {
            let cfg = &self.config.annotate;
            let mut registry = self.dataset.registry()?;
            let mut queue = self.open_queue()?;
            let mut summary = annotate::annotate_clips(
                &mut registry,
                &self.clips,
                self.backends.critic.as_ref(),
                &self.templates,
                &mut queue,
                cfg.workers,
            )?;
            if auto_accept {
                summary.auto_accepted = annotate::auto_accept(&mut queue, AUTO_REVIEWER)?;
            }
            let registry_changes = annotate::sync_registry(&queue, &mut registry);
            self.dataset.save_registry(&registry)?;
            let manifest = annotate::publish_manifest(&queue, &registry, &self.manifests, cfg.split_ratio, cfg.split_seed)?;
            Ok(AnnotateOutcome {
                summary,
                registry_changes,
                manifest_version: manifest.map(|m| m.version),
            })
        })
    }

    fn reviewed_manifest(&self) -> Result<DatasetManifest> {
        annotate::latest_reviewed(&self.manifests)?
            .ok_or_else(|| anyhow!("no reviewed manifest yet; run the annotate stage and resolve the review queue first"))
    }

    pub fn selfplay_driver(&self) -> SelfPlay<'_> {
        self.selfplay_driver_at(self.dataset.selfplay_dir())
    }

    pub fn selfplay_driver_at(&self, state_dir: PathBuf) -> SelfPlay<'_> {
        SelfPlay {
            config: &self.config.selfplay,
            backends: &self.backends,
            clips: &self.clips,
            manifests: &self.manifests,
            templates: &self.templates,
            state_dir,
        }
    }

    pub fn selfplay(&self, iterations: u32, state_dir: Option<PathBuf>) -> Result<Vec<IterationReport>> {
        self.tracked(Stage::Selfplay, || {
            let train = self.reviewed_manifest()?;
            if train.count(SplitTag::Train) == 0 {
                bail!("manifest v{} has no train clips", train.version);
            }
            let driver = self.selfplay_driver_at(state_dir.clone().unwrap_or_else(|| self.dataset.selfplay_dir()));
            Ok(driver.run(&train, iterations)?)
        })
    }

    /// Model the evaluation should use: the latest self-play model, if any.
    fn active_model(&self) -> Result<Option<String>> {
        let path = self.dataset.selfplay_dir().join("state.json");
        match std::fs::read(&path) {
            Ok(b) => Ok(Some(serde_json::from_slice::<LoopState>(&b)?.active_model_id)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Generated clip per test clip. Stored clips are listed in a checkpoint so a
    /// rerun for the same manifest, model and seed does not call the generator again.
    fn predictions(&self, manifest: &DatasetManifest, test: &[ManifestEntry], model: Option<&str>) -> Result<Vec<EvalPair>> {
        let dir = self.dataset.eval_dir();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!(
            "predictions-v{}-{}-s{}.json",
            manifest.version,
            model.unwrap_or("base"),
            self.config.eval.seed
        ));
        let mut done: BTreeMap<ClipId, ClipId> = match std::fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).with_context(|| format!("{}", path.display()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        done.retain(|_, generated| self.clips.contains(generated));
        let (cached, todo): (Vec<ManifestEntry>, Vec<ManifestEntry>) =
            test.iter().cloned().partition(|e| done.contains_key(&e.clip_id));
        let fresh = generate_predictions(&todo, &self.clips, self.backends.generator.as_ref(), model, self.config.eval.seed)?;
        for (e, p) in todo.iter().zip(&fresh) {
            done.insert(e.clip_id.clone(), self.clips.put(&p.generated)?);
        }
        write_atomic(&path, &serde_json::to_vec_pretty(&done)?)?;
        let mut pairs = Vec::with_capacity(test.len());
        for e in &cached {
            pairs.push(EvalPair {
                category: e.action_category,
                intention: e.intention.clone(),
                generated: self.clips.load(&done[&e.clip_id])?,
                reference: self.clips.load(&e.clip_id)?,
            });
        }
        pairs.extend(fresh);
        Ok(pairs)
    }

    pub fn eval(&self) -> Result<EvalOutcome> {
        self.tracked(Stage::Eval, || {
            let cfg = &self.config.eval;
            let manifest = self.reviewed_manifest()?;
            let test: Vec<_> = manifest.with_split(SplitTag::Test).cloned().collect();
            if test.is_empty() {
                bail!("manifest v{} has no test clips", manifest.version);
            }
            let model = self.active_model()?;
            let pairs = self.predictions(&manifest, &test, model.as_deref())?;

            // One rating session per (manifest, model); re-running picks up judgments.
            let session_id = format!("eval-v{}-{}", manifest.version, model.as_deref().unwrap_or("base"));
            let mut iar = IarStore::open(&self.dataset.iar_log_path())?;
            if iar.get(&session_id).is_none() {
                let items = pairs
                    .iter()
                    .map(|p| IarItem {
                        video_ref: p.generated.content_id(),
                        intention: p.intention.clone(),
                    })
                    .collect();
                iar.create(assign_raters(&session_id, items, default_rater_ids(cfg.raters), cfg.seed)?)?;
            }
            let mut report = evaluate(&pairs, self.backends.embedder.as_ref(), cfg.target_frames, iar.get(&session_id))?;
            report.model_id = model;

            let dir = self.dataset.eval_dir();
            std::fs::create_dir_all(&dir)?;
            let report_path = dir.join("report.json");
            let mut json = serde_json::to_vec_pretty(&report)?;
            json.push(b'\n');
            write_atomic(&report_path, &json)?;
            write_atomic(&dir.join("report.txt"), report.render_table().as_bytes())?;
            info!(path = %report_path.display(), "evaluation report written");
            Ok(EvalOutcome {
                report,
                iar_session_id: session_id,
                report_path,
            })
        })
    }

    pub fn run(&self, stages: &[Stage], options: &RunOptions) -> Result<RunSummary> {
        let mut out = RunSummary::default();
        let mut stages = stages.to_vec();
        stages.sort();
        stages.dedup();
        for stage in stages {
            match stage {
                Stage::Ingest => out.ingest = Some(self.ingest()?),
                Stage::Annotate => out.annotate = Some(self.annotate(options.auto_accept)?),
                Stage::Selfplay => {
                    let n = options.iterations.unwrap_or(self.config.selfplay.max_iterations);
                    out.selfplay = Some(self.selfplay(n, None)?);
                }
                Stage::Eval => out.eval = Some(self.eval()?),
            }
        }
        Ok(out)
    }
}
