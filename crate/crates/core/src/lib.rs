//! Test-time adaptation of concept bottleneck models built on frozen feature
//! embeddings: concept-score alignment, linear-probe adaptation and a
//! residual concept bottleneck, driven batch by batch over an unlabeled
//! target stream. A synthetic shift simulator supplies data with known
//! ground truth.

#![allow(clippy::needless_range_loop)]

pub mod adapt;
pub mod annotate;
pub mod config;
pub mod error;
pub mod gradaudit;
pub mod iofmt;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pseudolabel;
pub mod rng;
pub mod shiftsim;
pub mod stats;

pub use adapt::{AdaptSession, EvalReport};
pub use annotate::{AnnotationResult, SimilarityMatrix};
pub use config::{AdaptConfig, KCoh, StageConfig};
pub use error::{CondaError, Result};
pub use iofmt::RunConfig;
pub use model::{CbmModel, ConceptBank, LinearHead, ResidualBranch};
pub use numerics::DenseMatrix;
pub use pseudolabel::{PredictorLogits, PseudoLabeledBatch};
pub use shiftsim::{ScenarioKind, ScenarioSpec};
pub use stats::ClassStats;
