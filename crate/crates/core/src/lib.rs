//! Simulator for single-layer transformers trained on QA sentences versus
//! word-label ICL prompts over a hierarchical concept space.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod concept_space;
pub mod datagen;
mod dd;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod grads;
pub mod model;
pub mod ood;
pub mod plots;
pub mod rng;
pub mod trainer;

pub use concept_space::{ConceptBasis, Dictionary, Sign};
pub use datagen::{Sample, SampleKind, SampleSpec};
pub use error::{Error, Result};
pub use model::{ForwardTrace, ModelParams};
pub use experiment::ExperimentConfig;
pub use trainer::{TrainConfig, TrainLog};
