//! Blocking HTTP client for the backend wire protocol (see [`super::wire`]).

use std::sync::{Arc, Mutex};
use std::time::Duration;

use reqwest::blocking::multipart::{Form, Part};
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{self, DispatchResponse, EmbedParams, EmbedResponse, ErrorBody, GenerateParams, ScoreResponse};
use super::*;

#[derive(Debug, Clone)]
pub struct HttpOptions {
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl Default for HttpOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            max_in_flight: 4,
        }
    }
}

/// Client for one backend base URL. Implements every role trait; which one
/// the remote actually serves is checked with [`HttpBackend::handshake`].
pub struct HttpBackend {
    base_url: String,
    client: Client,
    options: HttpOptions,
    limit: Arc<ConcurrencyLimit>,
    embed_dim: Mutex<Option<usize>>,
}

impl HttpBackend {
    pub fn new(base_url: &str, options: HttpOptions) -> BackendResult<Self> {
        let client = Client::builder()
            .timeout(options.timeout)
            .build()
            .map_err(|e| BackendError::Connection(e.to_string()))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_owned(),
            client,
            limit: Arc::new(ConcurrencyLimit::new(options.max_in_flight)),
            options,
            embed_dim: Mutex::new(None),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// Fetches capabilities and checks the remote serves `role`.
    pub fn handshake(&self, role: Role) -> BackendResult<Capabilities> {
        let caps: Capabilities = self.call("capabilities", || self.client.get(self.url("/v1/capabilities")))?;
        caps.expect_role(role)?;
        if let Some(d) = caps.embed_dim {
            *self.embed_dim.lock().expect("poisoned") = Some(d);
        }
        Ok(caps)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }

    fn map_send_error(&self, e: reqwest::Error) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout(self.options.timeout)
        } else if e.is_decode() {
            BackendError::Malformed(e.to_string())
        } else {
            BackendError::Connection(e.to_string())
        }
    }

    fn send(&self, what: &str, build: impl Fn() -> RequestBuilder) -> BackendResult<Response> {
        let _permit = self.limit.acquire();
        self.options.retry.run(what, || {
            let resp = build().send().map_err(|e| self.map_send_error(e))?;
            let status = resp.status();
            if status.is_success() {
                return Ok(resp);
            }
            let body = resp.text().unwrap_or_default();
            let message = serde_json::from_str::<ErrorBody>(&body).map(|b| b.error).unwrap_or(body);
            Err(BackendError::Remote {
                status: status.as_u16(),
                message,
            })
        })
    }

    fn call<T: DeserializeOwned>(&self, what: &str, build: impl Fn() -> RequestBuilder) -> BackendResult<T> {
        let resp = self.send(what, build)?;
        let bytes = resp.bytes().map_err(|e| self.map_send_error(e))?;
        serde_json::from_slice(&bytes).map_err(|e| BackendError::Malformed(format!("{what}: {e}")))
    }

    fn json_part<T: Serialize>(value: &T) -> Part {
        Part::text(serde_json::to_string(value).expect("serialisable"))
            .mime_str("application/json")
            .expect("static mime")
    }

    fn clip_part(bytes: &[u8], name: &str) -> Part {
        Part::bytes(bytes.to_vec())
            .file_name(format!("{name}.clipraw"))
            .mime_str(wire::CLIPRAW_MIME)
            .expect("static mime")
    }

    fn check_embedding(&self, vectors: &[Vec<f64>]) -> BackendResult<()> {
        let mut dim = self.embed_dim.lock().expect("poisoned");
        validate_embeddings(vectors, &mut dim)
    }
}

impl Generator for HttpBackend {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        self.handshake(Role::Generator)
    }

    fn generate(&self, request: &GenerateRequest) -> BackendResult<VideoClip> {
        let params = GenerateParams::of(request);
        let observation = wire::frame_bytes(&request.observation);
        let resp = self.send("generate", || {
            let form = Form::new()
                .part("request", Self::json_part(&params))
                .part("observation", Self::clip_part(&observation, "observation"));
            self.client.post(self.url("/v1/generate")).multipart(form)
        })?;
        let bytes = resp.bytes().map_err(|e| self.map_send_error(e))?;
        wire::parse_clip(&bytes)
    }
}

impl Critic for HttpBackend {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        self.handshake(Role::Critic)
    }

    fn score(&self, videos: &[&VideoClip], request: &ScoreRequest) -> BackendResult<Vec<RubricScores>> {
        let payloads: Vec<Vec<u8>> = videos.iter().map(|v| wire::clip_bytes(v)).collect();
        let resp: ScoreResponse = self.call("score", || {
            let mut form = Form::new().part("request", Self::json_part(request));
            for (i, p) in payloads.iter().enumerate() {
                let name = format!("video_{i}");
                form = form.part(name.clone(), Self::clip_part(p, &name));
            }
            self.client.post(self.url("/v1/score")).multipart(form)
        })?;
        if resp.scores.len() != videos.len() {
            return Err(BackendError::Malformed(format!(
                "{} scores for {} videos",
                resp.scores.len(),
                videos.len()
            )));
        }
        Ok(resp.scores)
    }

    fn draft(&self, clip: &VideoClip, request: &DraftRequest) -> BackendResult<DraftReply> {
        let payload = wire::clip_bytes(clip);
        self.call("draft", || {
            let form = Form::new()
                .part("request", Self::json_part(request))
                .part("clip", Self::clip_part(&payload, "clip"));
            self.client.post(self.url("/v1/draft")).multipart(form)
        })
    }

    fn expand(&self, observation: &FrameTensor, request: &ExpandRequest) -> BackendResult<ExpandReply> {
        let payload = wire::frame_bytes(observation);
        self.call("expand", || {
            let form = Form::new()
                .part("request", Self::json_part(request))
                .part("observation", Self::clip_part(&payload, "observation"));
            self.client.post(self.url("/v1/expand")).multipart(form)
        })
    }
}

impl Trainer for HttpBackend {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        self.handshake(Role::Trainer)
    }

    fn dispatch(&self, spec: &TrainJobSpec) -> BackendResult<String> {
        let resp: DispatchResponse = self.call("train", || self.client.post(self.url("/v1/train")).json(spec))?;
        Ok(resp.job_id)
    }

    fn poll(&self, job_id: &str) -> BackendResult<TrainStatus> {
        let url = self.url(&format!("/v1/train/{job_id}"));
        self.call("train status", || self.client.get(&url)).map_err(|e| match e {
            BackendError::Remote { status: 404, .. } => BackendError::UnknownJob(job_id.to_owned()),
            e => e,
        })
    }
}

impl HttpBackend {
    fn embed(&self, clip: &VideoClip, level: EmbedLevel) -> BackendResult<Vec<Vec<f64>>> {
        let payload = wire::clip_bytes(clip);
        let params = EmbedParams { level };
        let resp: EmbedResponse = self.call("embed", || {
            let form = Form::new()
                .part("request", Self::json_part(&params))
                .part("clip", Self::clip_part(&payload, "clip"));
            self.client.post(self.url("/v1/embed")).multipart(form)
        })?;
        self.check_embedding(&resp.vectors)?;
        Ok(resp.vectors)
    }
}

impl Embedder for HttpBackend {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        self.handshake(Role::Embedder)
    }

    fn embed_frames(&self, frames: &[FrameTensor]) -> BackendResult<Vec<Vec<f64>>> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let clip = VideoClip::new(frames.to_vec(), crate::domain::Fps::default())?;
        let vectors = self.embed(&clip, EmbedLevel::Frame)?;
        if vectors.len() != frames.len() {
            return Err(BackendError::Malformed(format!(
                "{} embeddings for {} frames",
                vectors.len(),
                frames.len()
            )));
        }
        Ok(vectors)
    }

    fn embed_video(&self, clip: &VideoClip) -> BackendResult<Vec<f64>> {
        let mut vectors = self.embed(clip, EmbedLevel::Video)?;
        if vectors.len() != 1 {
            return Err(BackendError::Malformed(format!("{} embeddings for one video", vectors.len())));
        }
        Ok(vectors.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn connection_refused_is_retried_then_reported() {
        // Port 9 (discard) on localhost is essentially never listening.
        let backend = HttpBackend::new(
            "http://127.0.0.1:9",
            HttpOptions {
                timeout: Duration::from_millis(500),
                retry: RetryPolicy {
                    max_retries: 1,
                    base_delay_ms: 1,
                    max_delay_ms: 1,
                },
                max_in_flight: 1,
            },
        )
        .unwrap();
        let err = Generator::capabilities(&backend).unwrap_err();
        assert!(err.is_retryable(), "{err}");
    }
}
