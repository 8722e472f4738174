//! Few-shot segmentation with class-description embeddings.
//!
//! A small tensor and reverse-mode autodiff core ([`numerics`]) carries a
//! frozen CNN extractor ([`backbone`]), embedding projectors ([`semantics`]),
//! the segmentation model ([`hse`]), a synthetic shape benchmark
//! ([`episodes`]) and the training/evaluation harness ([`harness`]).

pub mod backbone;
pub mod episodes;
pub mod error;
pub mod exec;
pub mod harness;
pub mod hse;
pub mod numerics;
pub mod params;
pub mod seeding;
pub mod semantics;

pub use error::{HseError, Result};
pub use exec::Execution;
pub use numerics::{Real, Tensor};
