//! Multi-view transfer priors for linear template detectors.
//!
//! The crate trains linear multi-view template models with a structured
//! quadratic regularizer `w' K w` whose matrix `K = I - lambda * Sigma` is
//! learned from previously trained source models, and evaluates the result
//! on synthetic detection + viewpoint benchmarks.
//!
//! Pipeline, end to end:
//!
//! 1. [`synth`] builds procedural 3D worlds and renders window datasets.
//! 2. [`trainer`] fits source models with the identity regularizer.
//! 3. [`prior`] accumulates cross-cell covariance blocks from the sources
//!    over structural relations ([`geometry`] supplies the cross-view pairs)
//!    and assembles `Sigma`.
//! 4. [`regularizer`] turns `Sigma` into a positive definite `K` and its
//!    factorization `K = U'U`.
//! 5. [`trainer`] fits the target model against `K` (directly or through the
//!    whitening transform).
//! 6. [`eval`] scores joint localization + viewpoint quality.
//!
//! The `mvprior` binary drives the same steps from config files; [`pipeline`]
//! and [`report`] back it.

pub mod binio;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod pipeline;
pub mod prior;
pub mod regularizer;
pub mod report;
pub mod seeding;
pub mod synth;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use eval::{
    detect, evaluate, iou, joint_nms, Annotation, ConfusionMatrix, Detection, EvalReport,
    EvalSample, FeatureMap, GroundTruthBox, PixelBox, PrPoint,
};
pub use geometry::{CameraSpec, CellPairSet, EllipsoidSpec, Relation, SurfaceHit};
pub use model::{CellRef, MultiViewModel, TemplateLayout, ViewSlice};
pub use pipeline::{Manifest, ManifestEntry, Pipeline, PriorMeta};
pub use prior::{BlockCovariance, MaskSpec, MaskVariant, SigmaKind, SigmaMatrix};
pub use regularizer::{FactorMethod, Factorization, Regularizer};
pub use synth::{
    build_prior_sigma, chi_square_independence, chi_square_sf, generate_world, restricted_vp,
    run_protocol, sample_dataset, CategoryRole, Dataset, DatasetSpec, MethodSpec, PriorKind,
    ProtocolKind, ProtocolReport, ProtocolResults, ProtocolRow, ProtocolSpec, ShotCount,
    SurfaceField, World, WorldConfig,
};
pub use trainer::{
    LabeledWindow, LabeledWindowSet, StackedExample, TrainConfig, TrainLog, WindowLabel,
};
