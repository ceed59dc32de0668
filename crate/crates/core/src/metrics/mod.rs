//! Evaluation metrics: Fréchet distances over embeddings and human alignment rates.

pub mod frechet;
pub mod iar;
pub mod linalg;
pub mod report;
pub mod video;

pub use frechet::{frechet_distance, gaussian_stats, FrechetError, GaussianStats};
pub use iar::{assign_raters, compute_iar, IarSession, IarStore};
pub use linalg::sqrtm_psd;
pub use report::{evaluate, generate_predictions, EvalPair, EvalReport, POOLED_LABEL};
pub use video::{compute_fid, compute_fvd, downsample_indices, MetricError};
