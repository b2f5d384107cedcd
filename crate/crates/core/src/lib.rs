//! Workbench for self-supervised one-class anomaly detection.
//!
//! Small convolutional SSL models (SimSiam, BYOL, SimCLR) with optional L2
//! normalization after the encoder and on the projection, nearest-neighbor and
//! mean-direction scoring in plain and Mahalanobis space, feature ensembling,
//! vMF/MMD compactness diagnostics and a one-vs-all evaluation harness.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod nets;
pub mod scoring;
pub mod seeding;
pub mod ssl;

pub use autodiff::{Graph, ParamStore, Tensor, Var};
pub use data::{ImageDataset, RunConfig, SynthKind};
pub use diagnostics::{MmdResult, VmfFit};
pub use embedding::EmbeddingSet;
pub use error::{NsaError, Result};
pub use eval::{AurocResult, EvalSplit};
pub use nets::{FeatureMapName, Method, SslModel};
pub use scoring::{MahalanobisTransform, Metric, ScoreReport};
pub use ssl::{AugmentationPolicy, TrainConfig};
