//! Pipeline configuration: one TOML document, with `AEROLOOP_` environment
//! variables overriding leaf keys (`AEROLOOP_SERVICE__AUTH_TOKEN` sets
//! `service.auth_token`).

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use aeroloop_core::backends::http::{HttpBackend, HttpOptions};
use aeroloop_core::backends::mock::{MockCritic, MockEmbedder, MockGenerator, MockTrainer};
use aeroloop_core::backends::{BackendError, Backends, RetryPolicy, Role};
use aeroloop_core::ingest::{FilterPolicy, IngestConfig, SubprocessDecoder};
use aeroloop_core::selfplay::SelfPlayConfig;
use aeroloop_core::store::Dataset;
use figment::providers::{Env, Format, Serialized, Toml};
use figment::Figment;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Endpoint value selecting the in-process mock for a role.
pub const MOCK: &str = "mock";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Load(#[from] Box<figment::Error>),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub generator: String,
    pub critic: String,
    pub trainer: String,
    pub embedder: String,
    pub generate_timeout_secs: u64,
    pub score_timeout_secs: u64,
    pub embed_timeout_secs: u64,
    pub train_timeout_secs: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    /// Seed of the mock critic.
    pub mock_seed: u64,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            generator: MOCK.into(),
            critic: MOCK.into(),
            trainer: MOCK.into(),
            embedder: MOCK.into(),
            generate_timeout_secs: 300,
            score_timeout_secs: 60,
            embed_timeout_secs: 10,
            train_timeout_secs: 60,
            retries: 3,
            max_in_flight: 4,
            mock_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub sources_dir: PathBuf,
    pub clip_length: usize,
    pub stride: Option<usize>,
    pub static_threshold: f64,
    pub cut_threshold: f64,
    pub workers: usize,
    /// Command line that writes CLIPRAW to stdout for non-CLIPRAW sources.
    pub decoder: Option<String>,
}

impl Default for IngestSection {
    fn default() -> Self {
        let c = IngestConfig::default();
        Self {
            sources_dir: PathBuf::from("sources"),
            clip_length: c.clip_length,
            stride: c.stride,
            static_threshold: c.policy.static_threshold,
            cut_threshold: c.policy.cut_threshold,
            workers: c.workers,
            decoder: None,
        }
    }
}

impl IngestSection {
    pub fn ingest_config(&self) -> IngestConfig {
        IngestConfig {
            clip_length: self.clip_length,
            stride: self.stride,
            policy: FilterPolicy {
                static_threshold: self.static_threshold,
                cut_threshold: self.cut_threshold,
            },
            workers: self.workers,
        }
    }

    pub fn external_decoder(&self) -> Option<SubprocessDecoder> {
        self.decoder.as_deref().and_then(SubprocessDecoder::from_command_line)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateSection {
    pub workers: usize,
    pub lease_minutes: i64,
    pub templates_dir: Option<PathBuf>,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        Self {
            workers: 4,
            lease_minutes: aeroloop_core::annotate::DEFAULT_LEASE_MINUTES,
            templates_dir: None,
            split_ratio: 0.9,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Frames per clip fed to the video embedder.
    pub target_frames: usize,
    pub raters: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            target_frames: 16,
            raters: aeroloop_core::metrics::iar::DEFAULT_RATERS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub bind: String,
    /// Bearer token required on every endpoint except `/health`. Unset disables auth.
    pub auth_token: Option<String>,
    /// Command line run as `<cmd> <clip.clipraw>`; its stdout is the preview body.
    pub preview_encoder: Option<String>,
    pub preview_content_type: String,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            auth_token: None,
            preview_encoder: None,
            preview_content_type: "video/mp4".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_dir: PathBuf,
    pub backends: BackendsConfig,
    pub ingest: IngestSection,
    pub annotate: AnnotateSection,
    pub selfplay: SelfPlayConfig,
    pub eval: EvalSection,
    pub service: ServiceSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            backends: BackendsConfig::default(),
            ingest: IngestSection::default(),
            annotate: AnnotateSection::default(),
            selfplay: SelfPlayConfig::default(),
            eval: EvalSection::default(),
            service: ServiceSection::default(),
        }
    }
}

fn url_ok(s: &str) -> bool {
    s == MOCK
        || s
            .strip_prefix("http://")
            .or_else(|| s.strip_prefix("https://"))
            .is_some_and(|rest| !rest.is_empty() && !rest.starts_with('/') && !rest.contains(char::is_whitespace))
}

impl PipelineConfig {
    /// Defaults, then the file (if given), then `AEROLOOP_*` variables.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut fig = Figment::from(Serialized::defaults(PipelineConfig::default()));
        if let Some(p) = path {
            fig = fig.merge(Toml::file_exact(p));
        }
        let cfg: Self = fig
            .merge(Env::prefixed("AEROLOOP_").split("__"))
            .extract()
            .map_err(Box::new)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let b = &self.backends;
        for (role, url) in [
            ("generator", &b.generator),
            ("critic", &b.critic),
            ("trainer", &b.trainer),
            ("embedder", &b.embedder),
        ] {
            if !url_ok(url) {
                return Err(ConfigError::Invalid(format!("backends.{role} = {url:?} is neither \"mock\" nor an http(s) URL")));
            }
        }
        self.ingest
            .ingest_config()
            .policy
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.ingest.clip_length < 2 {
            return Err(ConfigError::Invalid("ingest.clip_length must be at least 2".into()));
        }
        if !(self.annotate.split_ratio > 0.0 && self.annotate.split_ratio < 1.0) {
            return Err(ConfigError::Invalid("annotate.split_ratio must lie in (0, 1)".into()));
        }
        if self.eval.target_frames == 0 || self.eval.raters == 0 {
            return Err(ConfigError::Invalid("eval.target_frames and eval.raters must be positive".into()));
        }
        self.selfplay
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn dataset(&self) -> std::io::Result<Dataset> {
        Dataset::open(&self.dataset_dir)
    }

    fn http(&self, url: &str, role: Role, timeout_secs: u64) -> Result<Arc<HttpBackend>, BackendError> {
        let backend = HttpBackend::new(
            url,
            HttpOptions {
                timeout: Duration::from_secs(timeout_secs),
                retry: RetryPolicy {
                    max_retries: self.backends.retries,
                    ..RetryPolicy::default()
                },
                max_in_flight: self.backends.max_in_flight,
            },
        )?;
        backend.handshake(role)?;
        Ok(Arc::new(backend))
    }

    /// Mock roles run in process; the rest are HTTP clients checked with a handshake.
    pub fn backends(&self, dataset: &Dataset) -> Result<Backends, BackendError> {
        let b = &self.backends;
        Ok(Backends {
            generator: if b.generator == MOCK {
                Arc::new(MockGenerator::default())
            } else {
                self.http(&b.generator, Role::Generator, b.generate_timeout_secs)?
            },
            critic: if b.critic == MOCK {
                Arc::new(MockCritic::new(b.mock_seed))
            } else {
                self.http(&b.critic, Role::Critic, b.score_timeout_secs)?
            },
            trainer: if b.trainer == MOCK {
                Arc::new(MockTrainer::new(dataset.manifests(), Arc::new(dataset.clips())))
            } else {
                self.http(&b.trainer, Role::Trainer, b.train_timeout_secs)?
            },
            embedder: if b.embedder == MOCK {
                Arc::new(MockEmbedder::new(self.eval.target_frames))
            } else {
                self.http(&b.embedder, Role::Embedder, b.embed_timeout_secs)?
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_documented_values() {
        let c = PipelineConfig::default();
        assert_eq!(c.ingest.clip_length, 129);
        assert_eq!((c.selfplay.m, c.selfplay.k, c.selfplay.synthetic_threshold), (3, 4, 256));
        assert_eq!((c.selfplay.batch_size, c.selfplay.grad_accum_steps, c.selfplay.epochs), (2, 8, 10));
        assert_eq!((c.selfplay.num_frames, c.selfplay.height, c.selfplay.width), (49, 480, 720));
        assert_eq!(c.annotate.split_ratio, 0.9);
        assert_eq!(c.eval.raters, 9);
        c.validate().unwrap();
    }

    #[test]
    fn file_then_environment() {
        figment::Jail::expect_with(|jail| {
            jail.create_file(
                "aeroloop.toml",
                r#"
                dataset_dir = "d"
                [selfplay]
                k = 2
                [service]
                auth_token = "from-file"
                "#,
            )?;
            jail.set_env("AEROLOOP_SERVICE__AUTH_TOKEN", "from-env");
            jail.set_env("AEROLOOP_SELFPLAY__SYNTHETIC_THRESHOLD", "4");
            let c = PipelineConfig::load(Some(Path::new("aeroloop.toml"))).unwrap();
            assert_eq!(c.dataset_dir, PathBuf::from("d"));
            assert_eq!(c.selfplay.k, 2);
            assert_eq!(c.selfplay.synthetic_threshold, 4);
            assert_eq!(c.service.auth_token.as_deref(), Some("from-env"));
            Ok(())
        });
    }

    #[test]
    fn rejects_bad_values() {
        figment::Jail::expect_with(|jail| {
            jail.create_file("a.toml", "[backends]\ngenerator = \"ftp://x\"")?;
            assert!(matches!(PipelineConfig::load(Some(Path::new("a.toml"))), Err(ConfigError::Invalid(_))));
            jail.create_file("b.toml", "[selfplay]\nk = 0")?;
            assert!(PipelineConfig::load(Some(Path::new("b.toml"))).is_err());
            jail.create_file("c.toml", "typo = 1")?;
            assert!(matches!(PipelineConfig::load(Some(Path::new("c.toml"))), Err(ConfigError::Load(_))));
            Ok(())
        });
        assert!(url_ok("http://10.0.0.2:9000"));
        assert!(!url_ok("http://"));
    }
}
