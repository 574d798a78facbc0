//! Meta-learning few-shot object detection at desk scale.
//!
//! The crate covers the whole pipeline: a small reverse-mode tensor engine,
//! synthetic scene generation, episodic base/novel data division, a
//! feature-reweighting detector, the meta-sampling and meta-cross loss,
//! Double-Maximum-Principle inference and mAP/ECES evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod episodes;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
