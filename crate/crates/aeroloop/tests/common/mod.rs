#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use aeroloop::config::PipelineConfig;
use aeroloop_core::backends::{
    BackendResult, Backends, Capabilities, Critic, DraftReply, DraftRequest, Embedder, ExpandReply, ExpandRequest,
    GenerateRequest, Generator, RubricScores, ScoreRequest, TrainJobSpec, TrainStatus, Trainer,
};
use aeroloop_core::{FrameTensor, VideoClip};

/// Small shapes so a full chain runs in well under a second with mocks.
pub fn micro_config(root: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.dataset_dir = root.join("data");
    c.ingest.sources_dir = root.join("sources");
    c.ingest.clip_length = 8;
    c.selfplay.synthetic_threshold = 4;
    c.selfplay.m = 1;
    c.selfplay.k = 2;
    c.selfplay.num_frames = 8;
    c.selfplay.height = 32;
    c.selfplay.width = 32;
    c.selfplay.train_poll_interval_ms = 1;
    c.eval.target_frames = 8;
    c
}

pub fn write_corpus(root: &Path, sources: usize) {
    aeroloop_core::synth::micro_corpus(&root.join("sources"), sources, 32, 32, 32, 0).unwrap();
}

/// Serves `router` on an ephemeral port from a background runtime.
pub fn spawn(router: axum::Router) -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let l = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(l, router).await.unwrap();
        });
    });
    format!("http://{addr}")
}

/// Counts every backend call made through the wrapped handles.
#[derive(Default)]
pub struct Calls {
    pub generate: AtomicUsize,
    pub critic: AtomicUsize,
    pub train: AtomicUsize,
    pub embed: AtomicUsize,
}

impl Calls {
    pub fn total(&self) -> usize {
        [&self.generate, &self.critic, &self.train, &self.embed]
            .iter()
            .map(|c| c.load(Ordering::SeqCst))
            .sum()
    }
}

struct Counted<T: ?Sized> {
    inner: Arc<T>,
    calls: Arc<Calls>,
}

impl Generator for Counted<dyn Generator> {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        self.inner.capabilities()
    }
    fn generate(&self, r: &GenerateRequest) -> BackendResult<VideoClip> {
        self.calls.generate.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(r)
    }
}

impl Critic for Counted<dyn Critic> {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        self.inner.capabilities()
    }
    fn score(&self, v: &[&VideoClip], r: &ScoreRequest) -> BackendResult<Vec<RubricScores>> {
        self.calls.critic.fetch_add(1, Ordering::SeqCst);
        self.inner.score(v, r)
    }
    fn draft(&self, c: &VideoClip, r: &DraftRequest) -> BackendResult<DraftReply> {
        self.calls.critic.fetch_add(1, Ordering::SeqCst);
        self.inner.draft(c, r)
    }
    fn expand(&self, o: &FrameTensor, r: &ExpandRequest) -> BackendResult<ExpandReply> {
        self.calls.critic.fetch_add(1, Ordering::SeqCst);
        self.inner.expand(o, r)
    }
}

impl Trainer for Counted<dyn Trainer> {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        self.inner.capabilities()
    }
    fn dispatch(&self, s: &TrainJobSpec) -> BackendResult<String> {
        self.calls.train.fetch_add(1, Ordering::SeqCst);
        self.inner.dispatch(s)
    }
    fn poll(&self, id: &str) -> BackendResult<TrainStatus> {
        self.inner.poll(id)
    }
}

impl Embedder for Counted<dyn Embedder> {
    fn capabilities(&self) -> BackendResult<Capabilities> {
        self.inner.capabilities()
    }
    fn embed_frames(&self, f: &[FrameTensor]) -> BackendResult<Vec<Vec<f64>>> {
        self.calls.embed.fetch_add(1, Ordering::SeqCst);
        self.inner.embed_frames(f)
    }
    fn embed_video(&self, c: &VideoClip) -> BackendResult<Vec<f64>> {
        self.calls.embed.fetch_add(1, Ordering::SeqCst);
        self.inner.embed_video(c)
    }
}

pub fn counted(b: &Backends) -> (Backends, Arc<Calls>) {
    let calls = Arc::new(Calls::default());
    let wrapped = Backends {
        generator: Arc::new(Counted { inner: b.generator.clone(), calls: calls.clone() }),
        critic: Arc::new(Counted { inner: b.critic.clone(), calls: calls.clone() }),
        trainer: Arc::new(Counted { inner: b.trainer.clone(), calls: calls.clone() }),
        embedder: Arc::new(Counted { inner: b.embedder.clone(), calls: calls.clone() }),
    };
    (wrapped, calls)
}
