//! Core library for building intention-conditioned aerial video world models.
//!
//! The crate is organised around the life cycle of the data:
//!
//! - [`domain`], [`clipraw`], [`manifest`], [`store`]: value types, the raw clip
//!   container, versioned dataset manifests and on-disk layout.
//! - [`ingest`]: segmentation of source videos into fixed-length clips and
//!   motion-based filtering of static or abruptly changing windows.
//! - [`annotate`]: chain-of-thought intention drafting and the human review queue.
//! - [`backends`]: the generator / critic / trainer / embedder protocols, their
//!   HTTP clients and deterministic mocks.
//! - [`selfplay`]: rejection-sampling self-play that grows a synthetic dataset and
//!   dispatches fine-tuning rounds.
//! - [`metrics`]: Fréchet distances over frame and clip embeddings, intention
//!   alignment rate sessions and evaluation reports.

pub mod annotate;
pub mod backends;
pub mod clipraw;
pub mod domain;
pub mod eventlog;
pub mod hashing;
pub mod imaging;
pub mod ingest;
pub mod manifest;
pub mod metrics;
pub mod selfplay;
pub mod store;
pub mod synth;
pub mod templates;

pub use domain::{
    ActionCategory, ClipError, ClipId, ClipRecord, ClipStatus, Fps, FrameTensor, VideoClip,
};
pub use manifest::{DatasetManifest, ManifestEntry, SplitTag};
