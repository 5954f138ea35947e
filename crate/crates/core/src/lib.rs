//! Domain-generalising text classification with contrastive and adversarial
//! training.
//!
//! The crate is organised bottom-up: [`tensor`] provides a small reverse-mode
//! autodiff tape over dense `f64` tensors, [`encoders`] builds the two feature
//! extractors and the classifier on top of it, [`losses`] implements the
//! supervised contrastive, cross-entropy and adversarial terms, and
//! [`trainer`] ties them together with Adam. [`data`] handles sparse corpora,
//! splits, synthetic benchmarks and the stratified batch sampler, while
//! [`eval`] computes per-domain accuracy, alignment diagnostics and ablation
//! tables.
//!
//! With the default `parallel` feature the dense kernels and ablation runs use
//! rayon; without it everything runs sequentially and produces bit-identical
//! results.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use data::{Batch, Corpus, Instance, SynthConfig};
pub use encoders::{MlpSpec, ModelParams};
pub use error::{Error, Result};
pub use eval::{Arm, Metrics};
pub use tensor::{Mode, Tape, Tensor, Var};
pub use trainer::{Ablation, HyperParams, Trainer};
