//! Fairness-regularized low-rank fine-tuning.
//!
//! A small feed-forward classifier whose hidden weights can carry low-rank
//! adapters is trained on
//! `J(θ) = L(θ) + λ·Σ_g (L_g(θ) − mean L_g)²`, with exact hand-written
//! gradients. Around that sit a fairness metric battery, Fréchet distance
//! between embedding sets, a seeded data pipeline, the training/sweep engine
//! and report generation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fair;
pub mod fid;
pub mod linalg;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod report;
pub mod train;

pub use data::{Dataset, DatasetRecord, GroupKey, SyntheticSpec};
pub use error::{Error, ErrorKind, Result};
pub use linalg::{Matrix, SeededRng};
pub use lora::{count_trainable, LoraAdapter, ParamCountSpec};
pub use metrics::{EvalBundle, MetricsReport};
pub use model::{BatchGradients, MlpClassifier, Mode, ParamId};
pub use train::{FineTuner, Method, Objective, RunArtifact, SweepSpec, TrainConfig};
